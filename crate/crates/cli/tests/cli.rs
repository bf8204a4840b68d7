use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SYNTHETIC: &str = r#"
model = "synthetic-quadratic"
n = 40
seed = 11
theta0 = [1.0, -1.0]
theta_true = [0.0, 0.0]
output = "report.json"

[spsa]
c = 0.01
N = 200

[synthetic]
h = [[2.0, 1.0], [1.0, 3.0]]

[reference]
source = "oracle"
"#;

fn emfim(dir: &Path, args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_emfim"));
    cmd.current_dir(dir).args(args);
    match threads {
        Some(t) => cmd.env("EMFIM_THREADS", t),
        None => cmd.env_remove("EMFIM_THREADS"),
    };
    cmd.output().unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn fit_writes_report_next_to_config() {
    let dir = setup(SYNTHETIC);
    let out = emfim(dir.path(), &["fit", "--config", "run.toml"], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("theta*"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["model"], "synthetic-quadratic");
    assert_eq!(json["em"]["converged"], true);
}

#[test]
fn compare_reports_are_byte_identical_across_runs_and_threads() {
    let dir = setup(SYNTHETIC);
    let a = emfim(dir.path(), &["compare", "--config", "run.toml", "--out", "a.json"], Some("1"));
    let b = emfim(dir.path(), &["compare", "--config", "run.toml", "--out", "b.json"], Some("3"));
    let c = emfim(dir.path(), &["compare", "--config", "run.toml", "--out", "c.json"], None);
    for o in [&a, &b, &c] {
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_eq!(read("a.json"), read("c.json"));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("spectral_relative"));
}

#[test]
fn flags_override_the_config() {
    let dir = setup(SYNTHETIC);
    let out = emfim(
        dir.path(),
        &["fim", "--config", "run.toml", "--mode", "observed", "--N", "17", "--c", "0.002", "--seed", "5", "--out", "o.json"],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 5);
    assert_eq!(json["config"]["spsa"]["N"], 17);
    assert_eq!(json["config"]["spsa"]["c"], 0.002);
    assert!(json["matrices"].as_array().unwrap().iter().any(|m| m["name"] == "spsa_observed"));
}

#[test]
fn dm_methods_run() {
    let dir = setup(SYNTHETIC);
    for method in ["sem", "spsa", "fd"] {
        let out = emfim(dir.path(), &["dm", "--config", "run.toml", "--method", method, "--out", "dm.json"], None);
        assert_eq!(out.status.code(), Some(0), "{method}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains(&format!("dm_{method}")));
    }
}

#[test]
fn bad_config_exits_2() {
    let dir = setup("model = \"gmm\"\nn = 0\n");
    let out = emfim(dir.path(), &["fit", "--config", "run.toml"], None);
    assert_eq!(out.status.code(), Some(2));
    let out = emfim(dir.path(), &["fit", "--config", "missing.toml"], None);
    assert_eq!(out.status.code(), Some(2));
    let dir = setup(SYNTHETIC);
    let out = emfim(dir.path(), &["fit", "--config", "run.toml"], Some("zero"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_convergence_exits_4() {
    let dir = setup(&SYNTHETIC.replace("[spsa]", "[em]\ndelta = 1e-14\nmax_iterations = 2\n\n[spsa]"));
    let out = emfim(dir.path(), &["fit", "--config", "run.toml"], None);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn numerical_failure_exits_3() {
    // π* = 0.005 with c = 0.01 pushes a probe outside (0, 1)
    let cfg = r#"
model = "gmm"
n = 50
seed = 3
theta_star = [0.005, 3.0, 0.0]
theta_true = [0.5, 3.0, 0.0]

[spsa]
c = 0.01
N = 10
mode = "observed"
"#;
    let dir = setup(cfg);
    let out = emfim(dir.path(), &["fim", "--config", "run.toml", "--mode", "observed"], None);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replicate"));
}

#[test]
fn baseline_methods_default_to_observed_mode() {
    let dir = setup(SYNTHETIC);
    for method in ["louis", "oakes", "sem"] {
        let out = emfim(dir.path(), &["fim", "--config", "run.toml", "--method", method, "--out", "b.json"], None);
        assert_eq!(out.status.code(), Some(0), "{method}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = emfim(dir.path(), &["fim", "--config", "run.toml", "--method", "louis", "--mode", "expected"], None);
    assert_eq!(out.status.code(), Some(2));
}
