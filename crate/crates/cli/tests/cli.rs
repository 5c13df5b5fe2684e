use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--n-normal",
    "12",
    "--n-anomalous",
    "4",
    "--min-len",
    "600",
    "--max-len",
    "900",
    "--window-size",
    "128",
];

fn gendetect(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gendetect"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gendetect(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, name: &str, seed: &str) {
    let mut args = vec!["synth", "--out", name, "--seed", seed];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
}

#[test]
fn no_arguments_prints_usage() {
    let tmp = TempDir::new().unwrap();
    let out = gendetect(tmp.path(), &[]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn unknown_flag_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = gendetect(tmp.path(), &["synth", "--out", "x.csv", "--widnow-size", "4"]);
    assert!(!out.status.success());
    assert!(!tmp.path().join("x.csv").exists());
}

#[test]
fn synth_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "a.csv", "1");
    synth(tmp.path(), "b.csv", "1");
    synth(tmp.path(), "c.csv", "2");
    let read = |n: &str| std::fs::read(tmp.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
}

#[test]
fn train_calibrate_score() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "data.csv", "3");
    ok(d, &["train", "--data", "data.csv", "--out", "m.bundle", "--model", "hmm", "--window-size", "128"]);

    let out = gendetect(d, &["score", "--bundle", "m.bundle", "--data", "data.csv", "--out", "v.csv"]);
    assert!(!out.status.success(), "scoring needs a threshold");
    assert!(stderr(&out).contains("no threshold"));
    assert!(!d.join("v.csv").exists());

    ok(d, &["calibrate", "--bundle", "m.bundle", "--data", "data.csv", "--out", "c.bundle"]);
    let stdout = ok(d, &["score", "--bundle", "c.bundle", "--data", "data.csv", "--out", "v.csv"]);
    assert!(stdout.contains("of 16 sequences flagged"), "{stdout}");

    let csv = std::fs::read_to_string(d.join("v.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sequence_id,score,flagged,true_label"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 16);
    for row in rows {
        let cols: Vec<_> = row.split(',').collect();
        assert_eq!(cols.len(), 4, "{row}");
        assert!(cols[1] == "unscorable" || cols[1].parse::<f64>().is_ok(), "{row}");
        assert!(cols[2] == "0" || cols[2] == "1");
    }
}

#[test]
fn mismatched_bundle_settings_fail_early() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "data.csv", "4");
    ok(d, &["train", "--data", "data.csv", "--out", "m.bundle", "--model", "hmm", "--window-size", "128"]);
    for (flag, value) in [("--feature-mode", "raw"), ("--model", "vae"), ("--window-size", "256")] {
        let out = gendetect(d, &["calibrate", "--bundle", "m.bundle", "--data", "data.csv", "--out", "c.bundle", flag, value]);
        assert!(!out.status.success(), "{flag} {value}");
        assert!(stderr(&out).contains("does not match"), "{}", stderr(&out));
        assert!(!d.join("c.bundle").exists());
    }
}

#[test]
fn missing_input_leaves_no_output() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = gendetect(d, &["train", "--data", "absent.csv", "--out", "m.bundle"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("absent.csv"));
    let leftovers: Vec<_> = std::fs::read_dir(d).unwrap().collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn corrupted_bundle_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "data.csv", "5");
    ok(d, &["train", "--data", "data.csv", "--out", "m.bundle", "--model", "hmm", "--window-size", "128"]);
    let path = d.join("m.bundle");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let out = gendetect(d, &["calibrate", "--bundle", "m.bundle", "--data", "data.csv"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("m.bundle"), "{}", stderr(&out));
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("run.toml"),
        "n_normal = 5\nn_anomalous = 2\nmin_len = 300\nmax_len = 400\nwindow_size = 64\nseed = 1\n",
    )
    .unwrap();
    ok(d, &["--config", "run.toml", "synth", "--out", "a.csv"]);
    ok(d, &["--config", "run.toml", "synth", "--out", "b.csv", "--n-normal", "3"]);
    let count = |n: &str| {
        let text = std::fs::read_to_string(d.join(n)).unwrap();
        let mut ids: Vec<_> = text.lines().skip(1).filter_map(|l| l.split(',').next()).collect();
        ids.dedup();
        ids.len()
    };
    assert_eq!(count("a.csv"), 7);
    assert_eq!(count("b.csv"), 5);

    std::fs::write(d.join("bad.toml"), "windw_size = 3\n").unwrap();
    let out = gendetect(d, &["--config", "bad.toml", "synth", "--out", "c.csv"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bad.toml"));
}

#[test]
fn bench_writes_one_record_per_seed() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let mut args = vec![
        "bench", "--model", "hmm", "--seeds", "1,2", "--out", "r.jsonl", "--verdicts", "v.csv",
    ];
    args.extend_from_slice(SMALL);
    let stdout = ok(d, &args);
    assert!(stdout.contains("Accuracy"), "{stdout}");
    assert!(stdout.lines().any(|l| l.starts_with("mean")));

    let text = std::fs::read_to_string(d.join("r.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for (r, seed) in records.iter().zip([1, 2]) {
        assert_eq!(r["seed"], seed);
        assert_eq!(r["model"], "hmm");
        let acc = r["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(d.join("v.csv").exists());
}

#[test]
fn airbus_bench_needs_a_data_dir() {
    let tmp = TempDir::new().unwrap();
    let out = gendetect(tmp.path(), &["bench", "--dataset", "airbus", "--out", "r.jsonl"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--data-dir"));
    assert!(!tmp.path().join("r.jsonl").exists());
}
