use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn scrawl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scrawl")).args(args).env("RUST_LOG", "warn").output().expect("spawn scrawl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "status {:?}\nstderr: {}", o.status, String::from_utf8_lossy(&o.stderr));
}

fn synth(dir: &Path, extra: &[&str]) {
    let d = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out", d, "--train", "6", "--validation", "2", "--test", "3", "--max-len", "8"];
    args.extend_from_slice(extra);
    assert_ok(&scrawl(&args));
}

fn train(corpus: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--preset",
        "desk",
        "--seed",
        "3",
        "--set",
        "epochs=1",
        "--set",
        "decode.max_len=24",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--threads",
        "1",
    ];
    args.extend_from_slice(extra);
    scrawl(&args)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn synth_writes_corpus_layout() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), &[]);
    for f in ["transcripts.tsv", "train.txt", "validation.txt", "test.txt"] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(tmp.path().join("test.txt")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_dir(tmp.path().join("images")).unwrap().count(), 11);
}

#[test]
fn one_epoch_writes_one_metrics_row_and_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    let out = tmp.path().join("run");
    synth(&corpus, &[]);
    assert_ok(&train(&corpus, &out, &[]));
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("epoch,train_loss,val_cer"));
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "1");
    assert!(rows[0][1].parse::<f64>().unwrap().is_finite());
    for f in ["epoch-000.ck", "epoch-001.ck", "best.ck", "config.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(cfg.contains("preset=desk\n") && cfg.contains("seed=3\n"));

    // Resuming appends to the same CSV.
    let ck = out.join("epoch-001.ck");
    let resumed = scrawl(&["train", "--checkpoint", ck.to_str().unwrap(), "--corpus", corpus.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_ok(&resumed);
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["1", "2"]);
}

#[test]
fn same_seed_gives_identical_first_row() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    synth(&corpus, &[]);
    let rows: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            assert_ok(&train(&corpus, &out, &[]));
            csv_rows(&out.join("metrics.csv"))
        })
        .collect();
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn usage_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere");
    assert_eq!(train(&missing, &tmp.path().join("out"), &[]).status.code(), Some(2));

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "colour=blue\n").unwrap();
    let o = scrawl(&["train", "--config", cfg.to_str().unwrap(), "--corpus", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    assert_eq!(scrawl(&["train", "--attention", "hard"]).status.code(), Some(2));
    assert_eq!(scrawl(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn evaluate_transcribe_and_visualize() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    let out = tmp.path().join("run");
    synth(&corpus, &[]);
    assert_ok(&train(&corpus, &out, &[]));
    let ck = out.join("epoch-000.ck");
    let ck_s = ck.to_str().unwrap();
    let corpus_s = corpus.to_str().unwrap();

    // An untrained model is far from the references.
    let o = scrawl(&["evaluate", "--checkpoint", ck_s, "--corpus", corpus_s, "--threads", "2"]);
    assert_ok(&o);
    let line = stdout(&o);
    let cer: f64 = line.trim().strip_prefix("CER ").unwrap().parse().unwrap();
    assert!(cer > 0.9, "{line}");
    assert_eq!(line.trim().split('.').nth(1).unwrap().len(), 2);
    let rows = csv_rows(&out.join("eval-test.csv"));
    assert_eq!(rows.len(), 3);
    let test_ids: Vec<String> = fs::read_to_string(corpus.join("test.txt")).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.iter().map(|r| r[0].clone()).collect::<Vec<_>>(), test_ids);

    // Shape disagreement names the offending tensor.
    let o = scrawl(&["evaluate", "--checkpoint", ck_s, "--corpus", corpus_s, "--preset", "desk", "--set", "decoder.hidden=32"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dec."), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(scrawl(&["evaluate", "--checkpoint", ck_s, "--corpus", corpus_s, "--split", "holdout"]).status.code(), Some(2));

    let img = corpus.join("images/synth-00000.pgm");
    let o = scrawl(&["transcribe", "--checkpoint", ck_s, img.to_str().unwrap()]);
    assert_ok(&o);
    assert_eq!(stdout(&o).lines().count(), 1);
    let missing = tmp.path().join("missing.pgm");
    assert_eq!(scrawl(&["transcribe", "--checkpoint", ck_s, missing.to_str().unwrap()]).status.code(), Some(2));
    let blank = tmp.path().join("blank.pgm");
    let mut bytes = b"P5\n40 20\n255\n".to_vec();
    bytes.extend(std::iter::repeat(255u8).take(800));
    fs::write(&blank, bytes).unwrap();
    assert_ok(&scrawl(&["transcribe", "--checkpoint", ck_s, blank.to_str().unwrap()]));

    let viz = tmp.path().join("viz");
    let o = scrawl(&["visualize", "--checkpoint", ck_s, img.to_str().unwrap(), "--out", viz.to_str().unwrap(), "--step", "0"]);
    assert_ok(&o);
    for f in ["attention.pgm", "overlay-000.pgm", "input.pgm", "transcription.txt"] {
        assert!(viz.join(f).is_file(), "{f}");
    }
    let input = fs::read(viz.join("input.pgm")).unwrap();
    let overlay = fs::read(viz.join("overlay-000.pgm")).unwrap();
    let dims = |b: &[u8]| String::from_utf8_lossy(&b[..16]).split_whitespace().skip(1).take(2).collect::<Vec<_>>().join("x");
    assert_eq!(dims(&input), dims(&overlay));
    let viz_bad = scrawl(&["visualize", "--checkpoint", ck_s, img.to_str().unwrap(), "--out", viz.to_str().unwrap(), "--step", "999"]);
    assert_eq!(viz_bad.status.code(), Some(2));
}

#[test]
fn overfit_checkpoint_transcribes_its_batch() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    let out = tmp.path().join("run");
    let d = corpus.to_str().unwrap();
    assert_ok(&scrawl(&["synth", "--out", d, "--seed", "5", "--train", "4", "--validation", "1", "--test", "1", "--max-len", "10"]));
    let o = train(&corpus, &out, &["--set", "epochs=200", "--set", "batch_size=4", "--set", "buckets.widths=176,960"]);
    assert_ok(&o);
    let ck = out.join("epoch-200.ck");
    let o = scrawl(&["evaluate", "--checkpoint", ck.to_str().unwrap(), "--corpus", d, "--split", "train"]);
    assert_ok(&o);
    assert_eq!(stdout(&o).trim(), "CER 0.00");
    let transcripts = fs::read_to_string(corpus.join("transcripts.tsv")).unwrap();
    let first_train = fs::read_to_string(corpus.join("train.txt")).unwrap().lines().next().unwrap().to_string();
    let want = transcripts.lines().find_map(|l| l.strip_prefix(&format!("{first_train}\t"))).unwrap().to_string();
    let img = corpus.join(format!("images/{first_train}.pgm"));
    let o = scrawl(&["transcribe", "--checkpoint", ck.to_str().unwrap(), img.to_str().unwrap()]);
    assert_ok(&o);
    assert_eq!(stdout(&o).trim_end_matches('\n'), want);
}
