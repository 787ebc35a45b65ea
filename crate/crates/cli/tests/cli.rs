use std::path::Path;
use std::process::{Command, Output};

use xmodal_kws::data::read_pairs;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmodal-kws"))
        .args(args)
        .env("XMODAL_KWS_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = run(args);
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let (c, err) = code(&["frobnicate"]);
    assert_eq!(c, 1);
    assert!(err.contains("Usage"), "{err}");
    assert_eq!(code(&[]).0, 1);
    assert_eq!(code(&["synth-corpus", "--tag", "E9"]).0, 1);
    assert_eq!(xmodal_kws_cli::run_command(["xmodal-kws", "nope"]), 1);
    assert_eq!(xmodal_kws_cli::run_command(["xmodal-kws", "--help"]), 0);
}

#[test]
fn pipeline_and_error_codes() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("corpus");
    let emb = d.path().join("emb");
    let pairs = d.path().join("pairs");
    let run_dir = d.path().join("run");
    let eval_dir = d.path().join("eval");
    let manifest = corpus.join("manifest.tsv");
    let (train_tsv, val_tsv, test_tsv) = (
        pairs.join("train_pairs.tsv"),
        pairs.join("val_pairs.tsv"),
        pairs.join("test_pairs.tsv"),
    );
    let emb_tsv = emb.join("embeddings.tsv");
    let ckpt_path = run_dir.join("model.ckpt");

    ok(&[
        "synth-corpus",
        "--keywords",
        "4",
        "--utterances",
        "15",
        "--out",
        p(&corpus),
        "--seed",
        "3",
    ]);
    ok(&[
        "synth-embeddings",
        "--manifest",
        p(&manifest),
        "--tag",
        "E1",
        "--out",
        p(&emb),
    ]);
    let shown = ok(&["inspect-embedding", p(&emb.join("000_madame.E1.emb"))]);
    assert!(
        shown.contains("madame") && shown.contains("E1") && shown.contains("rows     6"),
        "{shown}"
    );

    let summary = ok(&[
        "pairs",
        "--manifest",
        p(&manifest),
        "--out",
        p(&pairs),
        "--val-frac",
        "0.2",
        "--test-frac",
        "0.2",
    ]);
    assert!(summary.contains("train_pairs.tsv"));
    for name in ["train_pairs.tsv", "val_pairs.tsv", "test_pairs.tsv"] {
        let rows = read_pairs(pairs.join(name)).unwrap();
        assert!(!rows.is_empty() && rows.len().is_multiple_of(6));
        for group in rows.chunks(6) {
            let labels: Vec<u8> = group.iter().map(|r| r.label).collect();
            assert_eq!(labels, [1, 1, 1, 0, 0, 0]);
        }
    }

    let cfg = d.path().join("train.json");
    std::fs::write(
        &cfg,
        r#"{"batch_size": 16, "max_epochs": 1, "patience": 0, "embedding_tag": "E1"}"#,
    )
    .unwrap();
    let train_args = [
        "train",
        "--config",
        p(&cfg),
        "--train",
        p(&train_tsv),
        "--val",
        p(&val_tsv),
        "--manifest",
        p(&manifest),
        "--embeddings",
        p(&emb_tsv),
        "--out",
        p(&run_dir),
        "--deterministic",
    ];
    ok(&train_args);
    let log = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let eval_args = [
        "eval",
        "--checkpoint",
        p(&ckpt_path),
        "--pairs",
        p(&test_tsv),
        "--manifest",
        p(&manifest),
        "--embeddings",
        p(&emb_tsv),
        "--out",
        p(&eval_dir),
    ];
    ok(&eval_args);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap())
            .unwrap();
    assert!(report["overall"]["auc"].is_number(), "{report}");
    assert!(eval_dir.join("report.csv").is_file());
    assert!(std::fs::read_to_string(eval_dir.join("roc.csv"))
        .unwrap()
        .starts_with("threshold,far,frr"));

    // missing input: I/O error naming the file
    let missing = d.path().join("absent.tsv");
    let (c, err) = code(&["pairs", "--manifest", p(&missing), "--out", p(&pairs)]);
    assert_eq!(c, 2);
    assert!(err.contains("absent.tsv"), "{err}");

    // malformed pair file: format error naming the file and field
    let bad = d.path().join("bad_pairs.tsv");
    std::fs::write(
        &bad,
        "audio_id\tkeyword\tlabel\tdifficulty\tword_length\toov\nx\tmadame\t7\tpositive\t1\t0\n",
    )
    .unwrap();
    let mut args = eval_args;
    args[4] = p(&bad);
    let (c, err) = code(&args);
    assert_eq!(c, 2);
    assert!(
        err.contains("bad_pairs.tsv") && err.contains("label"),
        "{err}"
    );

    // truncated checkpoint
    let ckpt = d.path().join("short.ckpt");
    std::fs::write(
        &ckpt,
        &std::fs::read(run_dir.join("model.ckpt")).unwrap()[..100],
    )
    .unwrap();
    let mut args = eval_args;
    args[2] = p(&ckpt);
    assert_eq!(code(&args).0, 2);

    // value errors exit 1
    let mut args = eval_args.to_vec();
    args.extend(["--tag", "E3"]);
    let (c, err) = code(&args);
    assert_eq!(c, 1);
    assert!(err.contains("--tag"), "{err}");
    assert_eq!(
        code(&[
            "pairs",
            "--manifest",
            p(&manifest),
            "--out",
            p(&pairs),
            "--val-frac",
            "0.9"
        ])
        .0,
        1
    );
    std::fs::write(&cfg, r#"{"learning_rate": -1}"#).unwrap();
    let (c, err) = code(&train_args);
    assert_eq!(c, 1);
    assert!(err.contains("learning_rate"), "{err}");
    std::fs::write(&cfg, "{not json").unwrap();
    assert_eq!(code(&train_args).0, 2);
    assert_eq!(
        code(&["synth-corpus", "--keywords", "40", "--out", p(&corpus)]).0,
        1
    );
}

#[test]
fn gradcheck_passes_on_a_fresh_model() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("score_pair"));
    assert!(out.lines().last().unwrap().contains("pass"), "{out}");
}

#[test]
fn inspect_rejects_non_embedding_files() {
    let d = tempfile::tempdir().unwrap();
    let f = d.path().join("junk.emb");
    std::fs::write(&f, b"nope").unwrap();
    let (c, err) = code(&["inspect-embedding", p(&f)]);
    assert_eq!(c, 2);
    assert!(err.contains("junk.emb"), "{err}");
}
