use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn codeq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codeq")).args(args).output().expect("codeq runs")
}

fn ok(args: &[&str]) -> Output {
    let out = codeq(args);
    assert!(out.status.success(), "codeq {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

fn data(dir: &TempDir, n: usize, dim: usize) -> String {
    let path = p(dir.path(), "data.fvecs");
    ok(&["gen-data", "--n", &n.to_string(), "--dim", &dim.to_string(), "--seed", "1", "--out", &path]);
    path
}

/// Non-comment CSV lines, header first.
fn csv(path: &str) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn gen_data_writes_sidecar() {
    let dir = TempDir::new().unwrap();
    let path = data(&dir, 300, 8);
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 300 * (4 + 8 * 4));
    let side = std::fs::read_to_string(format!("{path}.json")).unwrap();
    assert!(side.contains("\"dim\": 8"));
}

#[test]
fn gen_stream_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let input = data(&dir, 2000, 8);
    let (a, b, c) = (p(dir.path(), "a.jsonl"), p(dir.path(), "b.jsonl"), p(dir.path(), "c.jsonl"));
    ok(&["gen-stream", "--input", &input, "--seed", "5", "--out", &a]);
    ok(&["gen-stream", "--input", &input, "--seed", "5", "--out", &b]);
    ok(&["gen-stream", "--input", &input, "--seed", "6", "--out", &c]);
    let read = |f: &str| std::fs::read_to_string(f).unwrap();
    // The header records the output path, so compare steps only.
    let steps = |f: &str| read(f).lines().skip(1).map(str::to_owned).collect::<Vec<_>>();
    assert_eq!(steps(&a), steps(&b));
    assert_ne!(steps(&a), steps(&c));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let input = data(&dir, 500, 8);
    let out = p(dir.path(), "s.jsonl");
    assert_eq!(codeq(&["gen-stream", "--input", &input, "--alpha", "2", "--out", &out]).status.code(), Some(2));
    assert_eq!(codeq(&["bench-recall", "--input", &input, "--method", "nope"]).status.code(), Some(2));
    let missing = p(dir.path(), "missing.fvecs");
    assert_eq!(codeq(&["bench-io", "--input", &missing]).status.code(), Some(3));
    let bad_cfg = p(dir.path(), "bad.toml");
    std::fs::write(&bad_cfg, "alhpa = 0.5\n").unwrap();
    assert_eq!(codeq(&["--config", &bad_cfg, "gen-stream", "--input", &input]).status.code(), Some(2));
}

#[test]
fn normalized_reference_is_one() {
    let dir = TempDir::new().unwrap();
    let input = data(&dir, 3000, 16);
    let sc = p(dir.path(), "s.jsonl");
    let out = p(dir.path(), "r.csv");
    ok(&["gen-stream", "--input", &input, "--seed", "2", "--tau", "3", "--out", &sc]);
    let iterations = std::fs::read_to_string(&sc).unwrap().lines().count() - 1;
    ok(&[
        "bench-recall", "--input", &input, "--scenario", &sc, "--method", "rebuildpq,frozenpq", "--blocks", "4",
        "--bits", "3", "--normalize-rebuild", "--out", &out,
    ]);
    let rows = csv(&out);
    assert_eq!(rows[0][..5], ["t", "vectors_streamed", "method", "recall_k_at_k", "recall_k_at_kprime"]);
    let rebuild: Vec<_> = rows[1..].iter().filter(|r| r[2] == "rebuildpq").collect();
    assert_eq!(rebuild.len(), iterations);
    assert_eq!(rows.len() - 1, 2 * iterations);
    for r in rebuild {
        assert_eq!((r[3].as_str(), r[4].as_str()), ("1.000000", "1.000000"));
    }
}

#[test]
fn bench_io_columns_and_determinism() {
    let dir = TempDir::new().unwrap();
    let input = data(&dir, 1200, 32);
    let (a, b) = (p(dir.path(), "a.csv"), p(dir.path(), "b.csv"));
    for out in [&a, &b] {
        ok(&["bench-io", "--input", &input, "--blocks", "4", "--seed", "3", "--out", out]);
    }
    let rows = csv(&a);
    assert_eq!(rows, csv(&b));
    assert_eq!(rows[0], ["n", "bits", "method", "trials", "mean_vectors_read", "std_error"]);
    // One size fits 1200 rows; two bit widths and two methods.
    assert_eq!(rows.len(), 1 + 4);
    for r in &rows[1..] {
        assert_eq!((r[0].as_str(), r[3].as_str()), ("1000", "10"));
        assert!(["codeq", "dedriftpq"].contains(&r[2].as_str()));
    }
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let input = data(&dir, 2000, 8);
    let cfg = p(dir.path(), "run.toml");
    std::fs::write(&cfg, "seed = 5\nalpha = 0.0\ntau = 4\n").unwrap();
    let (a, b) = (p(dir.path(), "a.jsonl"), p(dir.path(), "b.jsonl"));
    ok(&["--config", &cfg, "gen-stream", "--input", &input, "--alpha", "0.5", "--out", &a]);
    ok(&["gen-stream", "--input", &input, "--seed", "5", "--tau", "4", "--alpha", "0.5", "--out", &b]);
    let header = |f: &str| {
        let text = std::fs::read_to_string(f).unwrap();
        text.lines().next().unwrap().split("\"source\"").next().unwrap().to_owned()
    };
    assert!(header(&a).contains("\"alpha\":0.5"));
    assert!(header(&a).contains("\"tau\":4"));
    assert_eq!(header(&a), header(&b));
}

#[test]
fn codeq_beats_frozen_late_in_the_stream() {
    let dir = TempDir::new().unwrap();
    let input = data(&dir, 20_000, 32);
    let out = p(dir.path(), "r.csv");
    ok(&[
        "bench-recall", "--input", &input, "--seed", "4", "--method", "codeq,frozenpq", "--blocks", "8", "--bits", "4",
        "--out", &out,
    ]);
    let rows = csv(&out);
    let late = |m: &str| {
        let mut v: Vec<f64> = rows[1..].iter().filter(|r| r[2] == m).map(|r| r[3].parse().unwrap()).collect();
        let mut tail = v.split_off(v.len() / 2);
        tail.sort_by(f64::total_cmp);
        tail[tail.len() / 2]
    };
    let (codeq, frozen) = (late("codeq"), late("frozenpq"));
    assert!(codeq >= frozen, "codeq {codeq} < frozenpq {frozen}");
}

