use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gripforce_cli::commands::{BenchReport, SimRow};
use gripforce_cli::manifest::{sha256_file, Manifest};
use gripforce_core::dataset::read_dataset_file;

const SMALL: &str = r#"
seed = 7

[env]
episode_len = 5

[oracle]
max_evals = 21

[nets]
actor_hidden = [16, 16]
critic_hidden = [16, 16]
value_hidden = [16, 16]

[iql]
batch_size = 8
log_every = 5

[td3]
batch_size = 8
warmup = 5
actor_warmup = 4
eval_every = 10
eval_episodes = 1

[eval]
episodes = 2
"#;

fn gripforce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gripforce"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gripforce(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn collect_is_deterministic_and_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["collect", "--config", &cfg, "--episodes", "2", "--export-csv", "--out", s(out)]);
    }
    let episodes = read_dataset_file(a.join("dataset.ttw")).unwrap();
    assert_eq!(episodes.len(), 2);
    assert!(episodes.iter().all(|e| !e.transitions.is_empty() && e.transitions.len() <= 5));
    assert_eq!(
        sha256_file(a.join("dataset.ttw")).unwrap(),
        sha256_file(b.join("dataset.ttw")).unwrap()
    );

    let manifest = Manifest::read(&a).unwrap();
    assert_eq!(manifest.command, "collect");
    assert_eq!(manifest.seed, 7);
    let names: Vec<_> = manifest.artifacts.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(names, ["dataset.ttw", "collect.csv", "transitions.csv"]);
    let data_hash = &manifest.artifacts[0].sha256;
    assert_eq!(data_hash, &sha256_file(a.join("dataset.ttw")).unwrap());

    let mut rdr = csv::Reader::from_path(a.join("transitions.csv")).unwrap();
    let n: usize = episodes.iter().map(|e| e.transitions.len()).sum();
    assert_eq!(rdr.records().count(), n);
}

#[test]
fn simulate_trace_parses_back() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    ok(&["simulate", "--controller", "zero", "--steps", "40", "--traj-seed", "3", "--out", s(&out)]);
    let rows: Vec<SimRow> = csv::Reader::from_path(out.join("simulate.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 40);
    assert!(rows.windows(2).all(|w| w[1].t > w[0].t));
    assert!(rows.iter().all(|r| r.v1 == 0.0 && r.v2 == 0.0 && r.reward <= 0.0));
    assert!(rows.iter().any(|r| r.theta_ref != 0.0));

    let again = tmp.path().join("again");
    ok(&["simulate", "--controller", "zero", "--steps", "40", "--traj-seed", "3", "--out", s(&again)]);
    assert_eq!(
        fs::read(out.join("simulate.csv")).unwrap(),
        fs::read(again.join("simulate.csv")).unwrap()
    );
}

#[test]
fn zero_voltage_holds_force_on_flat_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("flat");
    ok(&["simulate", "--flat", "--steps", "200", "--out", s(&out)]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert!(report["max_force_err_n"].as_f64().unwrap() <= 1e-3);
    assert_eq!(report["terminations"].as_u64(), Some(0));
}

#[test]
fn bad_input_maps_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[plant]\nR = -4.0\n").unwrap();
    assert_eq!(gripforce(&["simulate", "--config", s(&bad)]).status.code(), Some(1));
    fs::write(&bad, "[plant]\nresistance = 4.0\n").unwrap();
    assert_eq!(gripforce(&["simulate", "--config", s(&bad)]).status.code(), Some(1));
    assert_eq!(gripforce(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gripforce(&["simulate", "--controller", "pid"]).status.code(), Some(1));
    assert_eq!(gripforce(&["simulate", "--controller", "policy"]).status.code(), Some(1));
    let missing = tmp.path().join("nope");
    assert_eq!(gripforce(&["simulate", "--config", s(&missing)]).status.code(), Some(3));
    assert_eq!(gripforce(&["bench", "--checkpoint", s(&missing)]).status.code(), Some(3));
    assert_eq!(gripforce(&["--help"]).status.code(), Some(0));
}

#[test]
fn learning_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    let iql = tmp.path().join("iql");
    let td3 = tmp.path().join("td3");
    ok(&["collect", "--config", &cfg, "--episodes", "3", "--out", s(&data)]);
    let dataset = data.join("dataset.ttw");
    ok(&["train-iql", "--config", &cfg, "--dataset", s(&dataset), "--updates", "20", "--out", s(&iql)]);
    let mut rdr = csv::Reader::from_path(iql.join("iql_curve.csv")).unwrap();
    assert_eq!(rdr.records().count(), 4);
    assert_eq!(Manifest::read(&iql).unwrap().inputs[0].path, "dataset.ttw");

    ok(&["finetune-td3", "--config", &cfg, "--iql", s(&iql), "--dataset", s(&dataset), "--steps", "20", "--out", s(&td3)]);
    let evals = csv::Reader::from_path(td3.join("td3_eval.csv")).unwrap().records().count();
    assert_eq!(evals, 3);

    let eval_out = tmp.path().join("eval");
    ok(&["evaluate", "--config", &cfg, "--checkpoint", s(&td3), "--out", s(&eval_out)]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(eval_out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["episodes"].as_array().unwrap().len(), 2);

    let bench_out = tmp.path().join("bench");
    ok(&["bench", "--config", &cfg, "--checkpoint", s(&td3), "--iterations", "200", "--out", s(&bench_out)]);
    let bench: BenchReport = serde_json::from_slice(&fs::read(bench_out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(bench.param_count, (10 * 16 + 16) + (16 * 16 + 16) + (16 * 2 + 2));
    assert_eq!(bench.memory_bytes_fp64, 8 * bench.param_count);
    assert_eq!(bench.iterations, 200);
    assert!(bench.median_latency_ms > 0.0 && bench.median_latency_ms <= bench.p99_latency_ms);
}

#[test]
fn pareto_writes_one_row_per_weight() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("pareto");
    ok(&["pareto", "--config", &cfg, "--weights-grid", "0.1,0.001", "--steps", "5", "--out", s(&out)]);
    let mut rdr = csv::Reader::from_path(out.join("pareto.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(rdr.records().count(), 2);
    assert_eq!(headers.iter().collect::<Vec<_>>(), ["w_F", "angle_cost", "force_cost"]);
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = gripforce_cli::RunConfig::load(root.join("default.toml")).unwrap();
    assert_eq!(default, gripforce_cli::RunConfig::default());
    let desk = gripforce_cli::RunConfig::load(root.join("desk.toml")).unwrap();
    assert_eq!(desk.collect.episodes, 50);
    assert_eq!(desk.iql.updates, 100_000);
    assert_eq!(desk.td3.steps, 20_000);
}
