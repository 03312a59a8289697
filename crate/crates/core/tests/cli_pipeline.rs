use std::path::Path;
use std::process::{Command, Output};

fn mtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtl-ctc")).args(args).output().expect("spawn binary")
}

fn ok(args: &[&str]) {
    let out = mtl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn prepared(root: &Path, n: &str) -> std::path::PathBuf {
    let raw = root.join("raw");
    let prep = root.join("prep");
    ok(&["synth", "--out", s(&raw), "--utterances", n, "--seed", "3"]);
    ok(&["prepare", "--manifest", s(&raw.join("manifest.tsv")), "--out", s(&prep), "--holdout", "10"]);
    prep
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path(), "50");
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&prep), "--out", s(&run), "--epochs", "2", "--batch-size", "4", "--lr", "2e-3"]);
    let ck = run.join("checkpoint_2.bin");
    ok(&["evaluate", "--data", s(&prep), "--checkpoint", s(&ck), "--beam-width", "8", "--dump-ctc", "utt00040"]);
    ok(&["decode", "--data", s(&prep), "--checkpoint", s(&ck), "--out", s(&run)]);
    ok(&["analyze", "--data", s(&prep), "--run", s(&run), "--weighted"]);

    for f in [
        "run_config.json",
        "checkpoint_1.bin",
        "checkpoint_2.bin",
        "metrics.csv",
        "steps.csv",
        "recognized.csv",
        "evaluation.txt",
        "errors_word.csv",
        "errors_char.csv",
        "errors_combined.csv",
        "transcripts.tsv",
        "curves_summary.csv",
        "cdf_word_frequency.csv",
        "cdf_char_length.csv",
        "cdf_char_frequency_tokens.csv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let dumps = std::fs::read_dir(&run)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("ctc_utt00040_"))
        .count();
    assert!(dumps > 0, "no alpha/beta dump");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let transcripts = std::fs::read_to_string(run.join("transcripts.tsv")).unwrap();
    assert_eq!(transcripts.lines().count(), 11);
    assert!(!transcripts.lines().skip(1).any(|l| l.split('\t').next_back().unwrap().contains("<unk>")));
}

#[test]
fn lambda_zero_matches_word_only_training() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path(), "20");
    let common = ["--epochs", "2", "--batch-size", "3", "--seed", "5"];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut args = vec!["train", "--data", s(&prep), "--out", s(&a), "--lambda", "0"];
    args.extend(common);
    ok(&args);
    let mut args = vec!["train", "--data", s(&prep), "--out", s(&b), "--heads", "word"];
    args.extend(common);
    ok(&args);

    let word_columns = |dir: &Path| -> Vec<String> {
        let text = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        let keep = ["epoch", "train_loss_word", "valid_wer_word"].map(|c| header.iter().position(|h| *h == c).unwrap());
        text.lines()
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                keep.iter().map(|&i| f[i]).collect::<Vec<_>>().join(",")
            })
            .collect()
    };
    assert_eq!(word_columns(&a), word_columns(&b));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtl(&["prepare", "--manifest", s(&dir.path().join("absent.tsv")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    assert_eq!(mtl(&["train", "--data"]).status.code(), Some(2));
    assert_eq!(mtl(&["bogus"]).status.code(), Some(2));
}

#[test]
fn checkpoint_from_other_vocabulary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(&dir.path().join("one"), "12");
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&prep), "--out", s(&run), "--epochs", "1", "--batch-size", "2"]);

    let raw = dir.path().join("two/raw");
    let other = dir.path().join("two/prep");
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"vocabulary": ["RED", "SUN", "TREE"]}"#).unwrap();
    ok(&["synth", "--out", s(&raw), "--utterances", "12", "--config", s(&spec)]);
    ok(&["prepare", "--manifest", s(&raw.join("manifest.tsv")), "--out", s(&other), "--holdout", "2"]);
    let out = mtl(&["decode", "--data", s(&other), "--checkpoint", s(&run.join("checkpoint_1.bin")), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabular"));
}
