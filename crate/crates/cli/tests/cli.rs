use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
[data]
n_per_class = 20
test_n_per_class = 10
num_queries = 2

[classifier]
epochs = 1
min_steps = 20

[prior]
warm_start_steps = 30

[prior.inr]
num_frequencies = 16
hidden_width = 16

[policy]
steps_per_stage = 5
plateau_window = 3

[metrics]
cd_repeats = 1
"#;

fn disc(dir: &Path, cmd: &str, config: &str) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_disc"))
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--output-dir")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn last_event(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().last().expect("no output")).unwrap()
}

fn with(extra: &str) -> String {
    format!("{SMALL}\n{extra}")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = disc(dir.path(), "generate", "[policy]\nstep_per_stage = 3\n");
    assert_eq!(out.status.code(), Some(2));
    let msg = last_event(&out)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("policy") && msg.contains("step_per_stage"), "{msg}");
}

#[test]
fn invalid_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = disc(dir.path(), "generate", "[policy]\nsuccess_prob = 1.5\n");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_without_artifacts_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let out = disc(dir.path(), "evaluate", SMALL);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(last_event(&out)["code"], 5);
}

#[test]
fn dep_objective_with_plain_bundle_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let trained = disc(dir.path(), "train-classifier", SMALL);
    assert!(trained.status.success(), "{}", String::from_utf8_lossy(&trained.stderr));
    let out = disc(dir.path(), "generate", &with("[objective]\nconsistency = \"dep\"\n"));
    assert_eq!(out.status.code(), Some(4));
    let msg = last_event(&out)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("bundle lacks loss predictor"), "{msg}");
    assert!(!dir.path().join("out").join("generation").exists());
}

#[test]
fn dep_train_generate_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("[classifier]\n", "[classifier]\nmode = \"dep\"\n");
    let trained = disc(dir.path(), "train-classifier", &cfg);
    assert!(trained.status.success(), "{}", String::from_utf8_lossy(&trained.stderr));
    assert_eq!(last_event(&trained)["event"], "trained");
    let manifest = read_json(&dir.path().join("out").join("bundle").join("manifest.json"));
    assert_eq!(manifest["mode"], "dep");
    assert_eq!(manifest["beta2"], 0.5);
    assert_eq!(manifest["gamma"], 1.0);

    let generated = disc(dir.path(), "generate", &cfg);
    assert!(generated.status.success(), "{}", String::from_utf8_lossy(&generated.stderr));
    let gen_dir = dir.path().join("out").join("generation");
    let summary = read_json(&gen_dir.join("summary.json"));
    assert_eq!(summary["num_queries"], 2);
    let resolved = read_json(&gen_dir.join("resolved_config.json"));
    assert_eq!(resolved["prior"]["warm_start_steps"], 30);
    let query_events = String::from_utf8_lossy(&generated.stdout).lines().filter(|l| l.contains("\"query\"")).count();
    assert_eq!(query_events, 2);

    let evaluated = disc(dir.path(), "evaluate", &cfg);
    assert!(evaluated.status.success(), "{}", String::from_utf8_lossy(&evaluated.stderr));
    let report = read_json(&dir.path().join("out").join("report.json"));
    assert_eq!(report["fingerprint"], summary["fingerprint"]);
    assert!(dir.path().join("out").join("per_sample.csv").exists());
}

#[test]
fn evaluate_with_no_successes_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    // Zero stages on a pixel prior return the query itself, which a
    // reasonably trained classifier keeps in its own class.
    let cfg = with("[objective]\nconsistency = \"none\"\n")
        .replace("min_steps = 20", "min_steps = 300")
        .replace("[prior]\n", "[prior]\nkind = \"pixel\"\n")
        .replace("[policy]\n", "[policy]\nmax_stages = 0\n");
    assert!(disc(dir.path(), "train-classifier", &cfg).status.success());
    let generated = disc(dir.path(), "generate", &cfg);
    assert!(generated.status.success(), "{}", String::from_utf8_lossy(&generated.stderr));
    let out = disc(dir.path(), "evaluate", &cfg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = last_event(&out);
    assert_eq!(report["num_success"], 0);
    assert!(report["mse"].is_null() && report["cd"].is_null());
}

#[test]
fn duq_manifest_records_head_settings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("[classifier]\n", "[classifier]\nmode = \"duq\"\n");
    let out = disc(dir.path(), "train-classifier", &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read_json(&dir.path().join("out").join("bundle").join("manifest.json"));
    assert_eq!(manifest["duq"]["length_scale"], 0.5);
    assert_eq!(manifest["duq"]["gradient_penalty"], 0.5);
}
