use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msnmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msnmt"))
        .args(args)
        .output()
        .expect("spawn msnmt")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, task: &str) {
    let o = msnmt(&["synth", "--task", task, "--train", "30", "--dev", "6", "--test", "6", "--seed", "5", "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn tiny_train(data: &Path, out: &Path, hidden: &str, extra: &[&str]) -> Output {
    let (s1, s2, t) = (data.join("train.src1"), data.join("train.src2"), data.join("train.tgt"));
    let (d1, d2, dt) = (data.join("dev.src1"), data.join("dev.src2"), data.join("dev.tgt"));
    let mut args = vec![
        "train", "--mode", "multi-childsum", "--attention", "local-p", "--layers", "1", "--hidden", hidden,
        "--window", "2", "--batch-size", "4", "--train-src1", p(&s1), "--train-src2", p(&s2), "--train-tgt",
        p(&t), "--dev-src1", p(&d1), "--dev-src2", p(&d2), "--dev-tgt", p(&dt), "--out-dir", p(out),
    ];
    args.extend_from_slice(extra);
    msnmt(&args)
}

#[test]
fn help_enumerates_config_keys_with_defaults() {
    let o = msnmt(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["mode", "attention", "layers", "hidden", "window", "dropout", "lr", "halve_after", "clip", "vocab_size"] {
        assert!(text.contains(key), "help lacks {key}");
    }
    assert!(text.contains("[default: 1000]"));
}

#[test]
fn validation_errors_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("a.txt");
    fs::write(&src, "x y\n").unwrap();
    let o = msnmt(&["train", "--mode", "multi-basic", "--train-src1", p(&src), "--layers", "0"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    for needle in ["train_src2", "train_tgt", "out_dir", "layers"] {
        assert!(err.contains(needle), "stderr lacks {needle}: {err}");
    }
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "learning_rate = 1\n").unwrap();
    let o = msnmt(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown config key `learning_rate`"));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let o = msnmt(&["score", "--hyp", p(&missing), "--ref", p(&missing)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn score_prints_report_line() {
    let dir = tempfile::tempdir().unwrap();
    let (h, r) = (dir.path().join("h"), dir.path().join("r"));
    fs::write(&h, "the cat sat on the mat\n").unwrap();
    fs::write(&r, "the cat sat on a red mat\n").unwrap();
    let o = msnmt(&["score", "--hyp", p(&h), "--ref", p(&r)]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        String::from_utf8_lossy(&o.stdout).trim(),
        "BLEU = 45.48, 83.3/60.0/50.0/33.3 (BP=0.846, ratio=0.857, hyp_len=6, ref_len=7)"
    );
}

#[test]
fn gradcheck_reports_and_flags_corruption() {
    let ok = msnmt(&["gradcheck", "--mode", "multi-basic", "--attention", "local-p", "--hidden", "4", "--layers", "1"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let out = String::from_utf8_lossy(&ok.stdout);
    assert!(out.contains("comb.l0.w_c") && out.contains("att.out.w_c"));
    let bad = msnmt(&[
        "gradcheck", "--mode", "multi-basic", "--attention", "local-p", "--hidden", "4", "--layers", "1",
        "--corrupt", "comb.l0.w_c",
    ]);
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("comb.l0.w_c"));
}

#[test]
fn train_translate_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "triangulate");
    let run = dir.path().join("run");
    let o = tiny_train(&data, &run, "6", &["--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.contains("mode = multi-childsum") && log.contains("lr = 0.7"), "{log}");
    for f in ["src1.vocab", "src2.vocab", "tgt.vocab", "checkpoint-epoch1", "checkpoint-epoch2", "best", "report.tsv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(run.join("report.tsv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(report.starts_with("epoch\tlr\ttrain_nll\tdev_ppl\tgrad_scale_rate\n"));

    let (t1, t2) = (data.join("test.src1"), data.join("test.src2"));
    let hyp = dir.path().join("hyp");
    let att = dir.path().join("att.tsv");
    let o = msnmt(&[
        "translate", "--checkpoint", p(&run), "--src1", p(&t1), "--src2", p(&t2), "--output", p(&hyp),
        "--beam", "3", "--dump-attention", p(&att),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&hyp).unwrap().lines().count(), 6);
    let dump = fs::read_to_string(&att).unwrap();
    assert!(dump.starts_with("sentence\ttarget_pos\tencoder_id\tsource_pos\tweight\talign\n"));
    assert!(dump.lines().skip(1).any(|l| l.split('\t').nth(2) == Some("2")));

    // One source for a two-source checkpoint, or an explicit wrong mode.
    let o = msnmt(&["translate", "--checkpoint", p(&run), "--src1", p(&t1), "--output", p(&hyp)]);
    assert_eq!(code(&o), 4);
    let o = msnmt(&[
        "translate", "--checkpoint", p(&run), "--mode", "multi-basic", "--src1", p(&t1), "--src2", p(&t2),
        "--output", p(&hyp),
    ]);
    assert_eq!(code(&o), 4);

    // Vocabularies from another run do not fit this checkpoint.
    let other = dir.path().join("other");
    fs::create_dir_all(&other).unwrap();
    for f in ["src1.vocab", "src2.vocab"] {
        fs::copy(run.join(f), other.join(f)).unwrap();
    }
    fs::write(other.join("tgt.vocab"), "# header\nzzz\n").unwrap();
    let o = msnmt(&[
        "translate", "--checkpoint", p(&run), "--vocab-dir", p(&other), "--src1", p(&t1), "--src2", p(&t2),
        "--output", p(&hyp),
    ]);
    assert_eq!(code(&o), 4);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "triangulate");
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    assert_eq!(code(&tiny_train(&data, &full, "6", &["--epochs", "4", "--halve-after", "2"])), 0);
    assert_eq!(code(&tiny_train(&data, &split, "6", &["--epochs", "2", "--halve-after", "2"])), 0);
    let o = tiny_train(&data, &split, "6", &["--epochs", "4", "--halve-after", "2", "--resume"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.tsv", "checkpoint-epoch3", "checkpoint-epoch4", "best"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_rejects_a_changed_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "triangulate");
    let run = dir.path().join("run");
    assert_eq!(code(&tiny_train(&data, &run, "6", &["--epochs", "1"])), 0);
    let o = tiny_train(&data, &run, "7", &["--epochs", "2", "--resume"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn synth_writes_three_splits() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "copy");
    for split in ["train", "dev", "test"] {
        let s = fs::read_to_string(dir.path().join(format!("{split}.src1"))).unwrap();
        let t = fs::read_to_string(dir.path().join(format!("{split}.tgt"))).unwrap();
        assert_eq!(s, t);
        assert!(!dir.path().join(format!("{split}.src2")).exists());
    }
    let again = tempfile::tempdir().unwrap();
    synth(again.path(), "copy");
    assert_eq!(
        fs::read(dir.path().join("train.src1")).unwrap(),
        fs::read(again.path().join("train.src1")).unwrap()
    );
}
