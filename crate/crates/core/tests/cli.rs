use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sinkcache"))
        .args(args)
        .env_remove("SINKCACHE_SEED")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Corpus and a briefly trained checkpoint in a fresh directory.
fn fixture() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("markov.tok");
    let ckpt = dir.path().join("m.ckpt");
    let out = run(&["gen-corpus", "--kind", "markov", "--size", "20000", "--out", p(&corpus)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "train", "--corpus", p(&corpus), "--out", p(&ckpt), "--steps", "3", "--seq-len", "16",
        "--d-model", "16", "--heads", "2", "--d-ff", "32", "--batch", "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    (dir, corpus, ckpt)
}

#[test]
fn pipeline_writes_outputs_and_provenance() {
    let (dir, corpus, ckpt) = fixture();
    let loss = std::fs::read_to_string(dir.path().join("m.ckpt.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    let prov: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("m.ckpt.provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["command"], "train");
    assert_eq!(prov["threads"], 1);

    let inspect = run(&["inspect", "--ckpt", p(&ckpt)]);
    assert_eq!(inspect.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&inspect.stdout).contains("checksum OK"));

    let csv = dir.path().join("ppl.csv");
    let out = run(&[
        "ppl", "--ckpt", p(&ckpt), "--corpus", p(&corpus), "--tokens", "64", "--policy", "sink:4+12",
        "--out", p(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("position,nll\n16,"));
    assert!(dir.path().join("ppl.csv.json").exists());
}

#[test]
fn zero_sink_streaming_reports_equal_window() {
    let (dir, corpus, ckpt) = fixture();
    let mut reports = Vec::new();
    for policy in ["sink:0+12", "window:12"] {
        let csv = dir.path().join(format!("{policy}.csv").replace(':', "_"));
        let out = run(&[
            "ppl", "--ckpt", p(&ckpt), "--corpus", p(&corpus), "--tokens", "80", "--policy", policy, "--out",
            p(&csv),
        ]);
        assert_eq!(out.status.code(), Some(0));
        reports.push(std::fs::read_to_string(&csv).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tok"), dir.path().join("b.tok"));
    let gen = |path: &Path, seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sinkcache"));
        cmd.args(["gen-corpus", "--kind", "copy", "--size", "500", "--out", p(path)]);
        match seed {
            Some(s) => cmd.env("SINKCACHE_SEED", s),
            None => cmd.env_remove("SINKCACHE_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(path).unwrap()
    };
    assert_ne!(gen(&a, Some("17")), gen(&b, None));
    assert_eq!(gen(&a, Some("17")), gen(&b, Some("17")));
}

#[test]
fn exit_codes() {
    let (dir, corpus, ckpt) = fixture();
    let out = dir.path().join("x.csv");
    // Usage errors.
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    let bad_policy = run(&["ppl", "--ckpt", p(&ckpt), "--corpus", p(&corpus), "--policy", "sink:4", "--out", p(&out)]);
    assert_eq!(bad_policy.status.code(), Some(2));
    assert_eq!(run(&["ppl", "--ckpt", p(&ckpt), "--policy", "window:0", "--out", p(&out)]).status.code(), Some(2));
    // Runtime errors.
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(run(&["inspect", "--ckpt", p(&missing)]).status.code(), Some(1));
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&ckpt, bytes).unwrap();
    let corrupt = run(&["inspect", "--ckpt", p(&ckpt)]);
    assert_eq!(corrupt.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&corrupt.stderr).is_empty());
    // Help is not an error.
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
