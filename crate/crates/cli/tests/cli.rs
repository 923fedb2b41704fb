use std::path::Path;
use std::process::{Command, Output};

use hetpref_cli::files::Manifest;

const BASE: &str = r#"
seed = 3
[simulate]
population = "custom"
n = 80
records_per_annotator = 5
choice_set_size = 3
thetas = [[2.0, 0.0], [0.0, 2.0], [-1.0, -1.5], [1.0, -2.0]]
etas = [0.4, 0.3, 0.2, 0.1]
[simulate.catalog]
n_prompts = 3
n_responses = 4
d = 2
[emdpo]
k = 4
max_iters = 5
[emdpo.solver]
ridge = 0.01
[aggregate.ae]
iters = 300
"#;

fn run(dir: &Path, args: &[&str], extra: &str) -> Output {
    run_with(dir, args, &format!("{BASE}\n{extra}\n"))
}

fn run_with(dir: &Path, args: &[&str], config: &str) -> Output {
    let cfg = dir.join(format!("cfg_{}.toml", args[0]));
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_hetpref")).args(args).arg("--config").arg(&cfg).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn pipeline(dir: &Path) -> String {
    let d = dir.join("data").display().to_string();
    ok(run(dir, &["simulate", "--out", &d], ""));
    ok(run(dir, &["emdpo", "--out", &d], ""));
    d
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn config_error_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_with(tmp.path(), &["show-config"], &BASE.replace("ridge = 0.01", "max_iters = \"many\""));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("emdpo.solver.max_iters"), "{err}");

    let out = run(tmp.path(), &["show-config"], "[aggregate]\nmethod = \"lw\"\n[aggregate.lw]\nstep = -1.0");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("aggregate.lw.step"));
}

#[test]
fn tampered_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = pipeline(tmp.path());
    let path = Path::new(&d).join("dataset.jsonl");
    let mut text = read(&path);
    text.push('\n');
    std::fs::write(&path, text).unwrap();
    let out = run(tmp.path(), &["emdpo", "--out", &d], "");
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.jsonl"));
}

#[test]
fn unconverged_m_step_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data").display().to_string();
    ok(run(tmp.path(), &["simulate", "--out", &d], ""));
    let strict = BASE.replace("ridge = 0.01", "ridge = 0.01\nmax_iters = 1\ngrad_tol = 1e-14");
    let out = run_with(tmp.path(), &["emdpo", "--out", &d], &strict);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn manifests_chain_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = pipeline(tmp.path());
    let sim: Manifest = serde_json::from_str(&read(Path::new(&d).join("simulate.manifest.json"))).unwrap();
    let em: Manifest = serde_json::from_str(&read(Path::new(&d).join("emdpo.manifest.json"))).unwrap();
    assert_eq!(sim.seed, 3);
    for name in ["catalog.json", "dataset.jsonl"] {
        assert_eq!(em.inputs[name], sim.outputs[name]);
    }
    for (name, hash) in &em.outputs {
        assert_eq!(&hetpref_cli::files::sha256_hex(&std::fs::read(Path::new(&d).join(name)).unwrap()), hash);
    }
    assert!(em.outputs.contains_key("traces/restart_0.csv"));
}

#[test]
fn uniform_aggregation_weights_and_regrets() {
    let tmp = tempfile::tempdir().unwrap();
    let d = pipeline(tmp.path());
    let a = tmp.path().join("agg").display().to_string();
    ok(run(tmp.path(), &["aggregate", "--input", &d, "--out", &a], "[aggregate]\nmethod = \"uniform\""));
    let sol: serde_json::Value = serde_json::from_str(&read(Path::new(&a).join("solution.json"))).unwrap();
    let w: Vec<f64> = serde_json::from_value(sol["weights"].clone()).unwrap();
    assert_eq!(w, vec![0.25; 4]);
    let regrets: Vec<f64> = serde_json::from_value(sol["regrets"].clone()).unwrap();
    let max = sol["max_regret"].as_f64().unwrap();
    let top = regrets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!((max - top).abs() <= 1e-10);
    let csv = read(Path::new(&a).join("regrets.csv"));
    assert_eq!(csv.lines().count(), 1 + 4 + 1);
    assert!(csv.starts_with("group,regret\n"));
}

#[test]
fn ae_trace_has_one_row_per_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let d = pipeline(tmp.path());
    let a = tmp.path().join("agg").display().to_string();
    ok(run(tmp.path(), &["aggregate", "--input", &d, "--out", &a], "[aggregate]\nmethod = \"ae\""));
    assert_eq!(read(Path::new(&a).join("trace.csv")).lines().count(), 1 + 300);
    let m = read(Path::new(&a).join("regret_matrix.csv"));
    assert_eq!(m.lines().count(), 1 + 5);
    let sol: serde_json::Value = serde_json::from_str(&read(Path::new(&a).join("solution.json"))).unwrap();
    assert!(sol["game_value"].as_f64().unwrap() >= 0.0);
    assert!(sol["duality_gap"].as_f64().unwrap() >= -1e-12);
}

#[test]
fn seed_flag_changes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a").display().to_string();
    let b = tmp.path().join("b").display().to_string();
    ok(run(tmp.path(), &["simulate", "--out", &a], ""));
    ok(run(tmp.path(), &["simulate", "--out", &b, "--seed", "4"], ""));
    assert_ne!(read(Path::new(&a).join("dataset.jsonl")), read(Path::new(&b).join("dataset.jsonl")));
    let m: Manifest = serde_json::from_str(&read(Path::new(&b).join("simulate.manifest.json"))).unwrap();
    assert_eq!(m.seed, 4);
}

#[test]
fn show_config_round_trips_through_the_loader() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(run(tmp.path(), &["show-config"], ""));
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = hetpref_cli::Config::from_toml(&text).unwrap();
    assert_eq!(cfg.emdpo.k, 4);
    assert_eq!(cfg.seed, 3);
}
