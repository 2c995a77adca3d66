use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tcprio_core::ingest::{dataset_stats, parse_canonical};

const BIN: &str = env!("CARGO_BIN_EXE_tcprio");

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const LIGHT_GRID: &str = r#"
[[rankers]]
kind = "random"
[[rankers]]
kind = "rocket"
[[rankers]]
kind = "svm"
[[rankers]]
kind = "ann"
restarts = 1
epochs = 3
[[rankers]]
kind = "gbdt"
n_estimators = 10
[[rankers]]
kind = "lrn"
restarts = 1
epochs = 3
"#;

#[test]
fn stats_missing_file_exits_2_and_names_path() {
    let out = run(&["stats", "/nonexistent/history.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/history.csv"));
}

#[test]
fn stats_json_matches_library() {
    let path = data("small.csv");
    let out = run(&["--json", "stats", s(&path)]);
    assert_eq!(out.status.code(), Some(0));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let h = parse_canonical(fs::File::open(&path).unwrap()).unwrap();
    let expected = serde_json::to_value(dataset_stats(&h)).unwrap();
    assert_eq!(printed, expected);
}

#[test]
fn malformed_csv_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, "cycle_id,test_id,verdict,duration_s\n0,T1,maybe,1.0\n").unwrap();
    let out = run(&["stats", s(&p)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let spec = data("small_spec.toml");
    assert!(run(&["--seed", "7", "synth", s(&spec), "--out", s(&a)])
        .status
        .success());
    assert!(run(&["--seed", "7", "synth", s(&spec), "--out", s(&b)])
        .status
        .success());
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    // The committed fixture was produced by this exact command.
    assert_eq!(bytes, fs::read(data("small.csv")).unwrap());

    let out = run(&["--json", "stats", s(&a)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["n_tests"], 30);
    assert_eq!(v["n_cycles"], 40);
    assert_eq!(v["n_executions"], 1200);
}

#[test]
fn synth_zero_cycles_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("s.toml");
    fs::write(
        &spec,
        "n_tests = 5\nn_cycles = 0\nbase_fail_prob = 0.1\npersistence = 0.5\nflip_prob = 0.1\nduration_min_s = 1.0\nduration_max_s = 2.0\n",
    )
    .unwrap();
    let out = run(&["synth", s(&spec), "--out", s(&dir.path().join("o.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_unknown_ranker_lists_kinds() {
    let out = run(&["replay", s(&data("small.csv")), "--ranker", "rl"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for k in ["random", "rocket", "svm", "ann", "gbdt", "lrn"] {
        assert!(err.contains(k), "{err}");
    }
}

#[test]
fn replay_too_short_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("short.csv");
    let mut text = String::from("cycle_id,test_id,verdict,duration_s\n");
    for c in 0..4 {
        text.push_str(&format!("{c},T1,fail,1.0\n{c},T2,pass,2.0\n"));
    }
    fs::write(&p, text).unwrap();
    let out = run(&["replay", s(&p), "--ranker", "rocket"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn replay_matches_golden_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "replay",
        s(&data("small.csv")),
        "--ranker",
        "rocket",
        "--history-frac",
        "0.6",
        "--budget-frac",
        "0.6",
        "--out",
        s(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let got = fs::read_to_string(dir.path().join("replay_summary.json")).unwrap();
    let golden = fs::read_to_string(data("rocket_h06_b06_summary.json")).unwrap();
    assert_eq!(got, golden);

    let cycles = fs::read_to_string(dir.path().join("replay_cycles.csv")).unwrap();
    assert_eq!(cycles.lines().count(), 1 + 8);
}

#[test]
fn replay_learned_ranker_smoke() {
    let out = run(&[
        "--json",
        "replay",
        s(&data("small.csv")),
        "--ranker",
        "svm",
        "--history-frac",
        "0.4",
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["cycles_evaluated"], 8);
    let apfd = v["mean_apfd"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&apfd));
    assert!(v["mean_train_s"].is_null());
}

#[test]
fn grid_writes_full_report_and_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("light.toml");
    fs::write(&cfg, LIGHT_GRID).unwrap();
    let full = dir.path().join("full");
    let out = run(&[
        "grid",
        s(&data("small.csv")),
        "--config",
        s(&cfg),
        "--out-dir",
        s(&full),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in tcprio_core::bench::REPORT_FILES {
        assert!(full.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(full.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 151);

    let one_h = dir.path().join("one_h.toml");
    fs::write(&one_h, format!("history_fractions = [0.5]\n{LIGHT_GRID}")).unwrap();
    let sub = dir.path().join("sub");
    let out = run(&[
        "grid",
        s(&data("small.csv")),
        "--config",
        s(&one_h),
        "--out-dir",
        s(&sub),
    ]);
    assert!(out.status.success());
    let csv = fs::read_to_string(sub.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
}

#[test]
fn grid_bytes_do_not_depend_on_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("light.toml");
    fs::write(&cfg, LIGHT_GRID).unwrap();
    let mut outputs = Vec::new();
    for w in ["1", "8"] {
        let o = dir.path().join(format!("w{w}"));
        let out = run(&[
            "grid",
            s(&data("small.csv")),
            "--config",
            s(&cfg),
            "--workers",
            w,
            "--out-dir",
            s(&o),
        ]);
        assert!(out.status.success());
        outputs.push((
            fs::read(o.join("grid.csv")).unwrap(),
            fs::read(o.join("grid.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn grid_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "history_fractions = [0.0]\n").unwrap();
    let out = run(&[
        "grid",
        s(&data("small.csv")),
        "--config",
        s(&cfg),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = run(&[
        "grid",
        s(&data("small.csv")),
        "--config",
        s(&cfg),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
