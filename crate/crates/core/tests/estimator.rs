use emfim::linalg::is_exactly_symmetric;
use emfim::models::{GaussianMixture, SyntheticQuadratic};
use emfim::spsa::{s_hat_from_q, PerturbationVector};
use emfim::stream::{observed_data, stream};
use emfim::{estimate_fim, Capabilities, Dataset, EmError, EmModel, FimMode, GradientSource, ParamVector, SpsaConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn pv(v: &[f64]) -> ParamVector {
    ParamVector::from_slice(v).unwrap()
}

fn cfg(c: f64, n: usize, seed: u64, mode: FimMode, source: GradientSource) -> SpsaConfig {
    SpsaConfig {
        c,
        n_replicates: n,
        seed,
        mode,
        gradient_source: source,
    }
}

/// `Q(θ|θ') = g·(θ − θ') − ½ a ‖θ − θ'‖²` with a fixed score
/// `S(θ) = −B(θ − θ0)` that ignores the data.
struct Fixed {
    g: Vec<f64>,
    a: f64,
    b: DMatrix<f64>,
    theta0: Vec<f64>,
}

impl Fixed {
    fn quadratic() -> Self {
        Fixed {
            g: vec![0.0, 0.0],
            a: 1.0,
            b: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]),
            theta0: vec![0.5, -0.5],
        }
    }
}

struct Draws(Vec<f64>);

impl Dataset for Draws {
    fn size(&self) -> usize {
        self.0.len()
    }
}

impl EmModel for Fixed {
    type Data = Draws;
    fn dim(&self) -> usize {
        self.g.len()
    }
    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("t{i}")).collect()
    }
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_s: true,
            has_observed_loglik: false,
            has_complete_info: false,
        }
    }
    fn validate(&self, theta: &ParamVector) -> emfim::Result<()> {
        theta.expect_dim(self.dim())
    }
    fn q_value(&self, theta: &ParamVector, cond: &ParamVector, _: &Draws) -> emfim::Result<f64> {
        let mut v = 0.0;
        for i in 0..self.dim() {
            let d = theta[i] - cond[i];
            v += self.g[i] * d - 0.5 * self.a * d * d;
        }
        Ok(v)
    }
    fn s_value(&self, theta: &ParamVector, _: &Draws) -> emfim::Result<ParamVector> {
        let d = theta.to_dvector() - nalgebra::DVector::from_column_slice(&self.theta0);
        ParamVector::from_dvector(&(-&self.b * d))
    }
    fn em_map(&self, theta: &ParamVector, _: &Draws) -> emfim::Result<ParamVector> {
        Ok(theta.clone())
    }
    fn sample_data(&self, _: &ParamVector, n: usize, rng: &mut dyn rand::RngCore) -> emfim::Result<Draws> {
        Ok(Draws((0..n).map(|_| rand::Rng::random::<f64>(rng)).collect()))
    }
}

#[test]
fn q_differences_on_simple_forms() {
    let data = Draws(vec![0.0]);
    let center = pv(&[0.3, -1.2]);
    let delta = PerturbationVector::from_entries(vec![0.01, -0.01]);
    let est = s_hat_from_q(&Fixed::quadratic(), &center, &delta, &data).unwrap();
    assert_eq!(est.as_slice(), &[0.0, 0.0]);

    let linear = Fixed {
        g: vec![2.0, -3.0],
        a: 0.0,
        ..Fixed::quadratic()
    };
    let est = s_hat_from_q(&linear, &center, &delta, &data).unwrap();
    // g·Δ̂ / Δ̂_m
    let dot = 2.0 * 0.01 + (-3.0) * (-0.01);
    assert!((est[0] - dot / 0.01).abs() < 1e-9);
    assert!((est[1] - dot / -0.01).abs() < 1e-9);
}

#[test]
fn one_dimensional_quadratic_is_exact_for_every_n() {
    let model = SyntheticQuadratic::new(DMatrix::from_element(1, 1, 2.5), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let data = model.sample_data(&pv(&[0.0]), 20, &mut observed_data(3)).unwrap();
    for n in [1, 2, 7, 100] {
        for mode in [FimMode::Expected, FimMode::Observed] {
            let est = estimate_fim(&model, &pv(&[0.1]), &data, &cfg(0.01, n, 5, mode, GradientSource::DirectS)).unwrap();
            assert!((est.matrix[(0, 0)] - 2.5).abs() <= 1e-12);
        }
    }
}

#[test]
fn linear_score_recovers_h_within_sampling_error() {
    let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
    let model = SyntheticQuadratic::new(h.clone(), DMatrix::identity(2, 2)).unwrap();
    let data = model.sample_data(&pv(&[0.0, 0.0]), 30, &mut observed_data(8)).unwrap();
    let est = estimate_fim(&model, &pv(&[0.2, 0.1]), &data, &cfg(0.01, 10_000, 8, FimMode::Expected, GradientSource::DirectS)).unwrap();
    let se = est.standard_errors();
    for i in 0..2 {
        for j in 0..2 {
            assert!((est.matrix[(i, j)] - h[(i, j)]).abs() <= 3.0 * se[(i, j)] + 1e-12);
        }
    }
}

#[test]
fn modes_coincide_when_the_score_ignores_data() {
    let model = Fixed::quadratic();
    let data = Draws(vec![0.25; 10]);
    let theta = pv(&[0.1, 0.2]);
    for source in [GradientSource::DirectS, GradientSource::QDifferences] {
        let e = estimate_fim(&model, &theta, &data, &cfg(0.05, 257, 42, FimMode::Expected, source)).unwrap();
        let o = estimate_fim(&model, &theta, &data, &cfg(0.05, 257, 42, FimMode::Observed, source)).unwrap();
        assert_eq!(e.matrix, o.matrix);
    }
}

#[test]
fn result_does_not_depend_on_thread_count() {
    let model = GaussianMixture;
    let theta = pv(&[0.7, 3.2, 0.05]);
    let data = model.sample_data(&theta, 300, &mut observed_data(2024)).unwrap();
    let run = |threads: usize, mode: FimMode| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| estimate_fim(&model, &theta, &data, &cfg(0.01, 999, 2024, mode, GradientSource::DirectS)).unwrap())
    };
    for mode in [FimMode::Expected, FimMode::Observed] {
        let (a, b) = (run(1, mode), run(4, mode));
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.per_sample_variance, b.per_sample_variance);
        assert!(is_exactly_symmetric(&a.matrix));
    }
}

#[test]
fn out_of_domain_probe_reports_the_replicate() {
    let model = GaussianMixture;
    let theta = pv(&[0.005, 3.0, 0.0]);
    let data = model.sample_data(&pv(&[0.5, 3.0, 0.0]), 50, &mut observed_data(1)).unwrap();
    let err = estimate_fim(&model, &theta, &data, &cfg(0.01, 10, 1, FimMode::Observed, GradientSource::DirectS)).unwrap_err();
    match err {
        EmError::Replicate { index, source } => {
            assert!(index < 10);
            assert!(matches!(*source, EmError::PerturbationOutOfDomain { coord: 0, .. }), "{source}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn direct_s_requires_the_capability() {
    let model = SyntheticQuadratic::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap().without_s();
    let data = model.sample_data(&pv(&[0.0, 0.0]), 5, &mut stream(0, 0)).unwrap();
    let err = estimate_fim(&model, &pv(&[0.0, 0.0]), &data, &cfg(0.01, 10, 1, FimMode::Observed, GradientSource::DirectS));
    assert!(matches!(err, Err(EmError::Unsupported(_))));
    // Q-differences carry cross-term noise even on a quadratic
    let ok = estimate_fim(&model, &pv(&[0.0, 0.0]), &data, &cfg(0.01, 4000, 1, FimMode::Observed, GradientSource::QDifferences)).unwrap();
    let se = ok.standard_errors();
    let id = DMatrix::<f64>::identity(2, 2);
    assert!((0..4).all(|k| (ok.matrix[k] - id[k]).abs() <= 3.0 * se[k] + 1e-9), "{}", ok.matrix);
}

fn spd(entries: [f64; 6]) -> DMatrix<f64> {
    let l = DMatrix::from_row_slice(3, 3, &[entries[0], 0.0, 0.0, entries[1], entries[2], 0.0, entries[3], entries[4], entries[5]]);
    &l * l.transpose() + DMatrix::identity(3, 3) * 0.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimates_are_exactly_symmetric(
        entries in proptest::array::uniform6(-2.0f64..2.0),
        seed in any::<u64>(),
        n in 1usize..200,
        observed in any::<bool>(),
        q_diff in any::<bool>(),
    ) {
        let model = SyntheticQuadratic::new(spd(entries), DMatrix::identity(3, 3)).unwrap();
        let data = model.sample_data(&pv(&[0.0, 0.0, 0.0]), 4, &mut observed_data(seed)).unwrap();
        let mode = if observed { FimMode::Observed } else { FimMode::Expected };
        let source = if q_diff { GradientSource::QDifferences } else { GradientSource::DirectS };
        let est = estimate_fim(&model, &pv(&[0.1, 0.0, -0.1]), &data, &cfg(0.01, n, seed, mode, source)).unwrap();
        prop_assert!(is_exactly_symmetric(&est.matrix));
        prop_assert!(est.per_sample_variance.iter().all(|v| *v >= 0.0));
    }
}
