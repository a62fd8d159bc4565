use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use tempfile::TempDir;

fn islu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_islu")).args(args).output().unwrap()
}

fn islu_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_islu"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn corpora(dir: &TempDir) -> (PathBuf, PathBuf) {
    let (train, dev) = (p(dir, "train.tsv"), p(dir, "dev.tsv"));
    ok(&islu(&["gen-corpus", "--intents", "3", "--utts", "60", "--seed", "1", "--out", s(&train)]));
    ok(&islu(&["gen-corpus", "--intents", "3", "--utts", "20", "--seed", "2", "--out", s(&dev)]));
    (train, dev)
}

const SMALL: &str = "epochs=2\nembedding_dim=12\nhidden_dim=6\nlr=0.01\n";

fn trained(dir: &TempDir, variant: &str, name: &str) -> PathBuf {
    let (train, dev) = corpora(dir);
    let cfg = p(dir, "small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let ckpt = p(dir, name);
    ok(&islu(&[
        "train", "--corpus", s(&train), "--dev", s(&dev), "--variant", variant, "--config", s(&cfg), "--out",
        s(&ckpt),
    ]));
    ckpt
}

#[test]
fn gen_corpus_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.tsv"), p(&dir, "b.tsv"));
    let out = islu(&["gen-corpus", "--intents", "4", "--utts", "25", "--seed", "9", "--out", s(&a)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed: 9"));
    ok(&islu(&["gen-corpus", "--intents", "4", "--utts", "25", "--seed", "9", "--out", s(&b)]));
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 25);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert!(text.lines().all(|l| l.split('\t').count() == 2));
}

#[test]
fn stitch_marks_every_utterance_end() {
    let dir = TempDir::new().unwrap();
    let (train, _) = corpora(&dir);
    let out = p(&dir, "streams.txt");
    ok(&islu(&["stitch", "--corpus", s(&train), "--max-utts", "4", "--seed", "3", "--out", s(&out)]));
    let text = fs::read_to_string(out).unwrap();
    let ends = text.matches('|').count();
    assert_eq!(ends, 60);
    let tokens: usize = text.lines().map(|l| l.split(' ').count()).sum();
    let corpus_tokens: usize = fs::read_to_string(&train)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().split(' ').count())
        .sum();
    assert_eq!(tokens, corpus_tokens);
    for line in text.lines() {
        assert!(line.ends_with('|'));
        assert!((1..=4).contains(&line.matches('|').count()));
    }
}

#[test]
fn train_writes_checkpoint_sidecars_and_history() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(&dir, "multitask", "m.ckpt");
    for ext in ["vocab", "intents", "history.csv"] {
        assert!(p(&dir, &format!("m.ckpt.{ext}")).exists(), "{ext}");
    }
    let history = fs::read_to_string(p(&dir, "m.ckpt.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,train_loss,dev_intent_acc,dev_eos_acc\n"));
    assert!(fs::read_to_string(ckpt).unwrap().starts_with("ISLU-CKPT v1\n"));
}

#[test]
fn training_twice_gives_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let a = trained(&dir, "multitask_fb", "a.ckpt");
    let b = trained(&dir, "multitask_fb", "b.ckpt");
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn eval_prints_one_row_per_stream_length() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(&dir, "multitask", "m.ckpt");
    let report = p(&dir, "report.json");
    let hist = p(&dir, "hist");
    let out = ok(&islu(&[
        "eval", "--checkpoint", s(&ckpt), "--corpus", s(&p(&dir, "dev.tsv")), "--max-utts", "1,3,5", "--mode",
        "predicted", "--report", s(&report), "--histogram-dir", s(&hist),
    ]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("model,max_utts,"));
    for (line, k) in lines[1..].iter().zip([1, 3, 5]) {
        assert!(line.starts_with(&format!("MULTITASK,{k},")), "{line}");
        assert_eq!(line.split(',').count(), lines[0].split(',').count());
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 3);
    assert_eq!(json[0]["metrics"]["n_utterances"], 20);
    let h = fs::read_to_string(hist.join("early_k3.csv")).unwrap();
    assert_eq!(h.lines().count(), 21);
}

#[test]
fn composite_eval_and_vocabulary_check() {
    let dir = TempDir::new().unwrap();
    let on = trained(&dir, "online", "on.ckpt");
    let eos = trained(&dir, "eos_only", "eos.ckpt");
    let dev = p(&dir, "dev.tsv");
    let out = ok(&islu(&[
        "eval", "--checkpoint", s(&on), "--eos-checkpoint", s(&eos), "--corpus", s(&dev), "--max-utts", "3", "--mode",
        "predicted",
    ]));
    assert!(out.lines().nth(1).unwrap().starts_with("ONLINE+EOS_ONLY,3,"));

    // an EOS model trained on a different corpus has a different vocabulary
    let other_train = p(&dir, "other.tsv");
    ok(&islu(&["gen-corpus", "--intents", "3", "--utts", "5", "--seed", "5", "--out", s(&other_train)]));
    let cfg = p(&dir, "small.cfg");
    let other = p(&dir, "other.ckpt");
    ok(&islu(&[
        "train", "--corpus", s(&other_train), "--dev", s(&dev), "--variant", "eos_only", "--config", s(&cfg), "--out",
        s(&other),
    ]));
    let bad = islu(&[
        "eval", "--checkpoint", s(&on), "--eos-checkpoint", s(&other), "--corpus", s(&dev), "--mode", "predicted",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn online_alone_cannot_predict_boundaries() {
    let dir = TempDir::new().unwrap();
    let on = trained(&dir, "online", "on.ckpt");
    let out = islu(&["eval", "--checkpoint", s(&on), "--corpus", s(&p(&dir, "dev.tsv")), "--mode", "predicted"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stream_without_boundary_model_commits_per_line() {
    let dir = TempDir::new().unwrap();
    let on = trained(&dir, "online", "on.ckpt");
    let out = ok(&islu_stdin(
        &["stream", "--checkpoint", s(&on)],
        "w01 key00a end1\nkey01b w02 w03 end2\n",
    ));
    let lines: Vec<Vec<&str>> = out.lines().map(|l| l.split('\t').collect()).collect();
    assert!(lines.iter().all(|f| f.len() == 3));
    let kinds: Vec<&str> = lines.iter().map(|f| f[1]).collect();
    assert_eq!(kinds.iter().filter(|&&k| k == "HYPOTHESIS").count(), 7);
    assert_eq!(kinds.iter().filter(|&&k| k == "INTENT_COMMITTED").count(), 2);
    let commits: Vec<&str> = lines
        .iter()
        .filter(|f| f[1] == "INTENT_COMMITTED")
        .map(|f| f[0])
        .collect();
    assert_eq!(commits, ["2", "6"]);
    let payload = &lines[0][2];
    assert_eq!(payload.split(' ').count(), 3);
    assert!(payload.split(' ').all(|pair| pair.starts_with("intent_") && pair.contains(':')));
}

#[test]
fn stream_with_forced_threshold() {
    let dir = TempDir::new().unwrap();
    let m = trained(&dir, "multitask", "m.ckpt");
    // any probability clears a threshold of 1e-9
    let out = ok(&islu_stdin(&["stream", "--checkpoint", s(&m), "--threshold", "1e-9"], "w01 key00a end1\n"));
    let eos: Vec<&str> = out.lines().filter(|l| l.contains("\tEOS_DETECTED\t")).collect();
    assert_eq!(eos.len(), 3);
    assert!(eos[0].split('\t').nth(2).unwrap().starts_with("eos:"));
    assert_eq!(out.lines().filter(|l| l.contains("\tINTENT_COMMITTED\t")).count(), 3);
}

#[test]
fn gradcheck_reports_a_small_error() {
    let out = ok(&islu(&["gradcheck", "--variant", "multitask_fb", "--seed", "1"]));
    let err: f64 = out
        .split('\t')
        .find_map(|f| f.strip_prefix("max_rel_error="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4, "{out}");
}

#[test]
fn exit_codes() {
    assert_eq!(islu(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(islu(&["gradcheck", "--variant", "sideways"]).status.code(), Some(1));
    assert_eq!(islu(&["gen-corpus", "--intents", "3"]).status.code(), Some(1));
    assert_eq!(islu(&["--help"]).status.code(), Some(0));
    let missing = islu(&["eval", "--checkpoint", "/nonexistent/x.ckpt", "--corpus", "/nonexistent/c.tsv"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));
    let dir = TempDir::new().unwrap();
    let bad = p(&dir, "bad.tsv");
    fs::write(&bad, "no tab here\n").unwrap();
    let out = p(&dir, "s.txt");
    assert_eq!(
        islu(&["stitch", "--corpus", s(&bad), "--max-utts", "2", "--out", s(&out)]).status.code(),
        Some(2)
    );
}
