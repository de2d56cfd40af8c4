use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diam::io::{read_task, PredictionMap, RunReport};

const SMALL: &[&str] = &[
    "--d", "16", "--n-base", "4", "--n-novel", "2", "--height", "8", "--width", "8", "--shots", "2", "--tile", "2",
];

fn diam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn diam_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diam"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn synth_small(dir: &Path, tasks: usize, seed: u64, extra: &[&str]) -> Vec<PathBuf> {
    let out = dir.to_str().unwrap();
    let (tasks, seed) = (tasks.to_string(), seed.to_string());
    let mut args = vec!["synth", "--out", out, "--tasks", &tasks, "--seed", &seed];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&diam(&args)).lines().map(PathBuf::from).collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        ok(&diam(&["synth", "--out", path(dir), "--tasks", "1", "--seed", "7", "--d", "64"]));
    }
    let fa = std::fs::read(a.path().join("task_000.diam")).unwrap();
    let fb = std::fs::read(b.path().join("task_000.diam")).unwrap();
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
}

#[test]
fn infer_defaults_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = synth_small(dir.path(), 1, 1, &[]);
    let report = dir.path().join("r.json");
    ok(&diam(&["infer", path(&tasks[0]), "--report", path(&report)]));
    let r = RunReport::read(&report).unwrap();
    assert_eq!(r.config.weights.alpha, 100.0);
    assert_eq!(r.config.weights.beta, 100.0);
    assert_eq!(r.config.learning_rate, 1.25e-3);
    assert_eq!(r.config.iterations, 100);
    assert_eq!(r.config.prior_policy.update_iterations, vec![0, 10]);
    assert!(!r.config.freeze_base);
    assert_eq!(r.tasks[0].trace.len(), 101);
}

#[test]
fn flags_override_preset() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = synth_small(dir.path(), 1, 2, &[]);
    let report = dir.path().join("r.json");
    ok(&diam(&[
        "infer", path(&tasks[0]), "--preset", "no-kd", "--alpha", "3", "--lr", "0.01", "--iters", "4",
        "--prior", "oracle", "--prior-updates", "2,1", "--freeze-base", "--seed", "9",
        "--similarity", "cosine", "--temperature", "5", "--report", path(&report),
    ]));
    let r = RunReport::read(&report).unwrap();
    assert_eq!(r.preset.as_deref(), Some("no-kd"));
    assert_eq!((r.config.weights.alpha, r.config.weights.beta), (3.0, 0.0));
    assert_eq!(r.config.learning_rate, 0.01);
    assert_eq!(r.config.iterations, 4);
    assert_eq!(r.config.prior_policy.kind, diam::PriorKind::Oracle);
    assert_eq!(r.config.prior_policy.update_iterations, vec![1, 2]);
    assert!(r.config.freeze_base);
    assert_eq!(r.seed, 9);
    assert_eq!(r.config.similarity, diam::Similarity::Cosine { temperature: 5.0 });
}

#[test]
fn reports_identical_modulo_timing_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = synth_small(dir.path(), 3, 5, &[]);
    let mut args: Vec<&str> = vec!["infer", "--iters", "20"];
    args.extend(tasks.iter().map(|p| path(p)));
    let mut texts = Vec::new();
    for (i, threads) in ["1", "1", "3"].into_iter().enumerate() {
        let report = dir.path().join(format!("r{i}.json"));
        let mut a = args.clone();
        a.extend(["--report", path(&report)]);
        ok(&diam_env(&a, "DIAM_THREADS", threads));
        let r = RunReport::read(&report).unwrap();
        assert_eq!(r.tasks.len(), 3);
        texts.push(r.without_timing().to_json().unwrap());
    }
    assert_eq!(texts[0], texts[1]);
    assert_eq!(texts[0], texts[2]);
}

#[test]
fn predictions_round_trip_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = synth_small(dir.path(), 1, 3, &[]);
    let preds = dir.path().join("preds");
    let report = dir.path().join("r.json");
    ok(&diam(&[
        "infer", path(&tasks[0]), "--iters", "10", "--predictions", path(&preds), "--report", path(&report),
    ]));
    let map = PredictionMap::read(preds.join("task_000.dimp")).unwrap();
    assert_eq!((map.height, map.width), (8, 8));

    let text = ok(&diam(&["eval", "--task", path(&tasks[0]), "--predictions", path(&preds.join("task_000.dimp"))]));
    let scores: diam::GfssScores = serde_json::from_str(&text).unwrap();
    let r = RunReport::read(&report).unwrap();
    assert_eq!(Some(scores), r.tasks[0].scores);
}

#[test]
fn fuse_requires_maps_and_writes_output() {
    let dir = tempfile::tempdir().unwrap();
    let with = synth_small(&dir.path().join("with"), 1, 4, &["--fg-maps"]);
    let without = synth_small(&dir.path().join("without"), 1, 4, &[]);
    let out = dir.path().join("fused.dimp");

    ok(&diam(&["fuse", path(&with[0]), "--tau", "0.5", "--out", path(&out)]));
    let fused = PredictionMap::read(&out).unwrap();
    let bundle = read_task(&with[0]).unwrap();
    fused.labels.validate(&bundle.task.partition).unwrap();

    let missing = diam(&["fuse", path(&without[0]), "--tau", "0.5"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("foreground maps"));

    let bad_tau = diam(&["fuse", path(&with[0]), "--tau", "1.5"]);
    assert_eq!(bad_tau.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let text = ok(&diam(&["gradcheck"]));
    let err: f64 = text
        .split_whitespace()
        .nth(3)
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("unexpected output: {text}"));
    assert!(err < 1e-4, "{text}");
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["frobnicate"][..],
        &["infer", "x.diam", "--bogus"],
        &["infer", "x.diam", "--preset", "nope"],
        &["infer", "x.diam", "--prior", "sometimes"],
        &["fuse", "x.diam"],
        &["infer"],
    ] {
        assert_eq!(diam(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_1() {
    let out = diam(&["infer", "/nonexistent/task.diam"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let dir = tempfile::tempdir().unwrap();
    let tasks = synth_small(dir.path(), 1, 6, &[]);
    let out = diam(&["infer", path(&tasks[0]), "--lr=-1"]);
    assert_eq!(out.status.code(), Some(1));

    let out = diam_env(&["infer", path(&tasks[0]), "--iters", "1"], "DIAM_THREADS", "many");
    assert_eq!(out.status.code(), Some(1));
}
