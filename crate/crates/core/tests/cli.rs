use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::sync::OnceLock;

use clap::Parser;
use tlhmm_scene::cli::{run, Cli, LoadedDataset, Outcome, RunConfig, Split, SplitManifest};
use tlhmm_scene::scene::ScenarioAgent;
use tlhmm_scene::tlhmm::{StateCount, TransferMode};

fn fixed(k: usize) -> StateCount {
    StateCount {
        fixed: Some(k),
        ..Default::default()
    }
}

/// Small settings so the whole pipeline runs in seconds.
fn quick_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.dataset.n_events = 24;
    c.train.t1 = 4;
    c.train.t2 = 4;
    c.train.layer1_states = fixed(2);
    c.train.layer2_states = fixed(2);
    c.scene.fit.components = Some(2);
    c.baselines.single_hmm_states = fixed(2);
    c.rollout.horizon = 10;
    c.rollout.n_samples = 200;
    c
}

fn cli(args: &[&str]) -> Cli {
    let mut full = vec!["tlhmm-scene"];
    full.extend_from_slice(args);
    Cli::try_parse_from(full).unwrap()
}

fn run_args(args: &[&str]) -> tlhmm_scene::Result<Outcome> {
    run(cli(args))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generated data, a trained model directory and the quick config, shared by
/// the tests below.
struct Fixture {
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).unwrap();
        let config = root.join("quick.toml");
        fs::write(&config, quick_config().to_toml().unwrap()).unwrap();
        let data = root.join("data");
        let model = root.join("model");
        run_args(&["generate", "--config", s(&config), "--out", s(&data)]).unwrap();
        run_args(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&model)]).unwrap();
        Fixture {
            root,
            config,
            data,
            model,
        }
    })
}

fn scratch(name: &str) -> PathBuf {
    let p = fixture().root.join(name);
    let _ = fs::remove_dir_all(&p);
    p
}

#[test]
fn default_generation_splits_102_26() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gen");
    let outcome = run_args(&["generate", "--out", s(&out)]).unwrap();
    for f in ["events.csv", "clean_events.csv", "split.json", "config.toml", "manifest.json"] {
        assert!(outcome.files.iter().any(|x| x == f), "missing {f}");
        assert!(out.join(f).exists());
    }
    let split: SplitManifest = serde_json::from_str(&fs::read_to_string(out.join("split.json")).unwrap()).unwrap();
    assert_eq!((split.n_train, split.n_test), (102, 26));
    assert_eq!(split.events.iter().filter(|e| e.split == Split::Train).count(), 102);
    let ds = LoadedDataset::load(&out).unwrap();
    assert_eq!(ds.events.len(), 128);
    assert_eq!(ds.of_split(Split::Test).len(), 26);
}

#[test]
fn empty_generation_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let outcome = run_args(&["generate", "--n-events", "0", "--out", s(&out)]).unwrap();
    assert!(outcome.failures.is_empty());
    let ds = LoadedDataset::load(&out).unwrap();
    assert!(ds.events.is_empty());
}

#[test]
fn non_empty_output_directories_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("keep.txt"), "x").unwrap();
    assert!(run_args(&["generate", "--n-events", "2", "--out", s(dir.path())]).is_err());
    assert_eq!(fs::read_to_string(dir.path().join("keep.txt")).unwrap(), "x");
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reruns_are_byte_identical() {
    let f = fixture();
    let a = scratch("det-gen-a");
    let b = scratch("det-gen-b");
    for out in [&a, &b] {
        run_args(&["generate", "--config", s(&f.config), "--seed", "5", "--out", s(out)]).unwrap();
    }
    assert_eq!(read_all(&a), read_all(&b));
    let ma = scratch("det-train-a");
    let mb = scratch("det-train-b");
    for out in [&ma, &mb] {
        run_args(&["train", "--config", s(&f.config), "--data", s(&a), "--out", s(out)]).unwrap();
    }
    assert_eq!(read_all(&ma), read_all(&mb));
    // a different seed changes the data
    let c = scratch("det-gen-c");
    run_args(&["generate", "--config", s(&f.config), "--seed", "6", "--out", s(&c)]).unwrap();
    assert_ne!(fs::read(a.join("events.csv")).unwrap(), fs::read(c.join("events.csv")).unwrap());
}

#[test]
fn inference_refuses_training_events_unless_asked() {
    let f = fixture();
    let ds = LoadedDataset::load(&f.data).unwrap();
    let train_id = ds.of_split(Split::Train)[0].id.clone();
    let out = scratch("infer-refuse");
    let err = run_args(&[
        "infer", "--data", s(&f.data), "--model", s(&f.model), "--event", &train_id, "--out", s(&out),
    ]);
    assert!(err.is_err());
    let out = scratch("infer-allow");
    let ok = run_args(&[
        "infer", "--data", s(&f.data), "--model", s(&f.model), "--event", &train_id, "--allow-train", "--out",
        s(&out),
    ])
    .unwrap();
    assert!(ok.files.iter().any(|x| x == &format!("posteriors/tlhmm/{train_id}.csv")));
}

#[test]
fn inference_writes_aligned_baselines() {
    let f = fixture();
    let out = scratch("infer-all");
    let outcome = run_args(&[
        "infer", "--config", s(&f.config), "--data", s(&f.data), "--model", s(&f.model), "--baselines", "--out",
        s(&out),
    ])
    .unwrap();
    assert!(outcome.failures.is_empty());
    let ds = LoadedDataset::load(&f.data).unwrap();
    let test = ds.of_split(Split::Test);
    for sub in ["tlhmm", "single_hmm", "qda", "aligned"] {
        let n = fs::read_dir(out.join("posteriors").join(sub)).unwrap().count();
        assert_eq!(n, test.len(), "{sub}");
    }
    let failures = fs::read_to_string(out.join("failures.json")).unwrap();
    assert_eq!(failures.trim(), "[]");
}

#[test]
fn config_round_trips_through_toml() {
    let c = quick_config();
    let text = c.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    assert!(RunConfig::from_toml("[dataset]\nn_events = 3\nbogus = 1\n").is_err());
    let partial = RunConfig::from_toml("[evaluate]\ntheta = 0.8\n").unwrap();
    assert_eq!(partial.evaluate.theta, 0.8);
    assert_eq!(partial.dataset, RunConfig::default().dataset);
    // the echoed config of a run reproduces the run's settings
    let echoed = RunConfig::load(&fixture().data.join("config.toml")).unwrap();
    assert_eq!(echoed.dataset.n_events, 24);
}

#[test]
fn seed_flag_overrides_every_seed() {
    let mut c = quick_config();
    c.set_seed(123);
    assert_eq!(c.dataset.seed, 123);
    assert_eq!(c.train.seed, 123);
    assert_eq!(c.scene.seed, 123);
    assert_eq!(c.rollout.seed, 123);
    assert_eq!(c.baselines.seed, 123);
}

#[test]
fn rollout_heatmaps_are_normalized() {
    let f = fixture();
    let out = scratch("rollout");
    run_args(&["rollout", "--config", s(&f.config), "--data", s(&f.data), "--model", s(&f.model), "--out", s(&out)])
        .unwrap();
    for agent in ScenarioAgent::BOTH {
        let text = fs::read_to_string(out.join(format!("heatmap_{}.csv", agent.label()))).unwrap();
        let total: f64 = text
            .lines()
            .skip(2)
            .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("rollout.json")).unwrap()).unwrap();
    assert_eq!(summary["n_samples"], 200);
    assert_eq!(summary["horizon"], 10);
    let p: f64 = summary["posterior"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((p - 1.0).abs() < 1e-9);
    // ensemble rows: one per sample, step and agent, plus the header
    let rows = fs::read_to_string(out.join("ensemble.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 200 * 11 * 2);

    let bad = scratch("rollout-bad");
    let early = run_args(&[
        "rollout", "--config", s(&f.config), "--data", s(&f.data), "--model", s(&f.model), "--start", "1", "--out",
        s(&bad),
    ]);
    assert!(early.is_err());
}

#[test]
fn transfer_reports_every_mode() {
    let f = fixture();
    let target = scratch("target");
    run_args(&["generate", "--transfer-target", "--n-events", "16", "--out", s(&target)]).unwrap();
    let out = scratch("transfer");
    run_args(&["transfer", "--config", s(&f.config), "--data", s(&target), "--model", s(&f.model), "--out", s(&out)])
        .unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("transfer_report.json")).unwrap()).unwrap();
    let setups = report["setups"].as_array().unwrap();
    assert_eq!(setups.len(), TransferMode::ALL.len());
    assert_eq!(setups[0]["mode"], "frozen");
    assert_eq!(setups[0]["layer2_iterations"], 0);
    for mode in TransferMode::ALL {
        assert!(out.join(mode.label()).join("manifest.json").exists());
    }
    assert!(fs::read_to_string(out.join("iterations.csv")).unwrap().starts_with("mode,model,n_states"));
}

#[test]
fn evaluate_honours_theta_override() {
    let f = fixture();
    let out = scratch("eval");
    run_args(&[
        "evaluate", "--config", s(&f.config), "--data", s(&f.data), "--model", s(&f.model), "--theta", "0.8", "--out",
        s(&out),
    ])
    .unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["theta"], 0.8);
    let names: Vec<&str> = summary["models"].as_array().unwrap().iter().map(|m| m["model"].as_str().unwrap()).collect();
    assert_eq!(names, vec!["tlhmm", "single_hmm", "qda"]);
    let bad = scratch("eval-bad");
    assert!(run_args(&["evaluate", "--data", s(&f.data), "--model", s(&f.model), "--theta", "0.4", "--out", s(&bad)]).is_err());
}

#[test]
fn binary_reports_success_and_failure_through_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_tlhmm-scene");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let ok = Process::new(exe).args(["generate", "--n-events", "4", "--out", s(&out)]).output().unwrap();
    assert!(ok.status.success());
    assert_eq!(String::from_utf8(ok.stdout).unwrap().trim(), s(&out));
    let missing = Process::new(exe)
        .args(["train", "--config", "/definitely/not/here.toml", "--data", s(&out)])
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8(missing.stderr).unwrap().contains("error"));
    let usage = Process::new(exe).args(["frobnicate"]).output().unwrap();
    assert!(!usage.status.success());
}
