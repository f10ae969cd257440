use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[model]
A = 2.0
kappa = 1.5
gamma = 2.0
sigma = 0.4
mu = 1.0
alpha = 1.0
T = 2.0

[lattice]
n_s = 101
q_cap = 10
dt = 0.01

[simulation]
paths = 50
seed = 3
policy = "constant"
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrmm"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("mrmm.toml"), config).unwrap();
    dir
}

#[test]
fn solve_is_deterministic_and_self_compare_is_zero() {
    let dir = setup(CONFIG);
    let first = run(dir.path(), &["solve", "--out", "a"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second = run(dir.path(), &["solve", "--out", "b"]);
    assert!(second.status.success());
    for name in ["surface_final.bin", "surface_final.csv", "policy.csv", "report.json"] {
        let a = fs::read(dir.path().join("a/fd").join(name)).unwrap();
        let b = fs::read(dir.path().join("b/fd").join(name)).unwrap();
        assert!(a == b, "{name} differs between identical runs");
    }

    let cmp = run(dir.path(), &["compare", "--out", "c", "a/fd/surface_final.bin", "b/fd/surface_final.bin"]);
    assert!(cmp.status.success(), "{}", String::from_utf8_lossy(&cmp.stderr));
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("c/compare/compare.json")).unwrap()).unwrap();
    let pairs = json["pairwise"].as_array().unwrap();
    assert!(!pairs.is_empty());
    for p in pairs {
        assert_eq!(p["max_abs"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn simulate_writes_summary() {
    let dir = setup(CONFIG);
    let out = run(dir.path(), &["simulate", "--out", "o", "--paths", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("o/simulation/summary.json")).unwrap()).unwrap();
    assert_eq!(json["summary"]["paths"].as_u64(), Some(20));
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = setup(&CONFIG.replace("kappa = 1.5", "kappa = -1.5"));
    let out = run(dir.path(), &["solve"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let dir = setup(CONFIG);
    let out = run(dir.path(), &["equilibrium", "--surface", "missing.bin"]);
    assert_eq!(out.status.code(), Some(1));
}
