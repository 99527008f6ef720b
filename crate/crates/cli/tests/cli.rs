//! Command-line behaviour: error lines, exit codes and composition.

use std::path::Path;
use std::process::{Command, Output};

fn rakie(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rakie"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn rakie")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = rakie(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// The single stderr line of a failed run.
fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    lines[0].to_string()
}

fn setup(dir: &Path) {
    ok(dir, &["gen-synth", "--out", "s", "--train", "40", "--dev", "10", "--test", "10", "--text-fraction", "0.5"]);
    ok(
        dir,
        &["build-kc", "--corpus", "s/corpus.jsonl", "--images", "s/kc_images.tsv", "--text-out", "t.kc", "--image-out", "i.kc"],
    );
    ok(dir, &["index-text", "--kc", "t.kc", "--out", "t.idx"]);
    ok(dir, &["index-image", "--kc", "i.kc", "--out", "i.idx"]);
}

#[test]
fn usage_errors_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = rakie(dir.path(), &["train", "--channel", "audio"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error: E_USAGE: "));
    let out = rakie(dir.path(), &["frobnicate"]);
    assert!(error_line(&out).starts_with("error: E_USAGE: "));
    assert!(rakie(dir.path(), &["--help"]).status.success());
}

#[test]
fn runtime_errors_carry_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = rakie(dir.path(), &["index-text", "--kc", "missing.kc", "--out", "x"]);
    assert!(error_line(&out).starts_with("error: E_IO: "));

    std::fs::write(dir.path().join("bad.toml"), "version = 2\n").unwrap();
    let out = rakie(dir.path(), &["--config", "bad.toml", "index-text", "--kc", "x", "--out", "y"]);
    assert!(error_line(&out).starts_with("error: E_VERSION: "));

    std::fs::write(dir.path().join("junk.toml"), "version = 1\nwidth = 3\n").unwrap();
    let out = rakie(dir.path(), &["--config", "junk.toml", "index-text", "--kc", "x", "--out", "y"]);
    assert!(error_line(&out).starts_with("error: E_CONFIG: "));

    setup(dir.path());
    let out = rakie(dir.path(), &["index-text", "--kc", "i.kc", "--out", "x"]);
    assert!(error_line(&out).starts_with("error: E_INPUT: "));
    let out = rakie(dir.path(), &["retrieve", "--channel", "text", "--index", "i.idx", "--data", "s/train.ner", "--out", "c"]);
    assert!(error_line(&out).starts_with("error: E_FORMAT: "), "{}", error_line(&out));
}

#[test]
fn piped_retrieval_equals_in_process_retrieval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    for (channel, index, images) in [("text", "t.idx", None), ("image", "i.idx", Some("s/query_images.tsv"))] {
        let mut retrieve = vec!["retrieve", "--channel", channel, "--k", "10", "--index", index, "--data", "s/train.ner", "--out", "c"];
        let mut train = vec!["--seed", "3", "train", "--channel", channel, "--train", "s/train.ner"];
        if let Some(img) = images {
            retrieve.extend(["--images", img]);
            train.extend(["--images", img]);
        }
        ok(d, &retrieve);
        let mut piped = train.clone();
        piped.extend(["--contexts", "c", "--out", "piped.m"]);
        ok(d, &piped);
        let mut direct = train.clone();
        direct.extend(["--index", index, "--out", "direct.m"]);
        ok(d, &direct);
        assert_eq!(std::fs::read(d.join("piped.m")).unwrap(), std::fs::read(d.join("direct.m")).unwrap(), "{channel}");
    }
}

#[test]
fn modified_expert_fails_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    std::fs::write(d.join("fast.toml"), "version = 1\nepochs = 2\nmoe_epochs = 2\n").unwrap();
    for (ch, idx) in [("text", "t.idx"), ("image", "i.idx")] {
        let mut args = vec!["retrieve", "--channel", ch, "--index", idx, "--data", "s/train.ner", "--out"];
        let out = format!("{ch}.ctx");
        args.push(&out);
        args.extend(["--images", "s/query_images.tsv"]);
        ok(d, &args);
        let model = format!("{ch}.m");
        ok(
            d,
            &["--config", "fast.toml", "train", "--channel", ch, "--train", "s/train.ner", "--contexts", &out, "--out", &model],
        );
    }
    ok(
        d,
        &[
            "train-moe", "--text-model", "text.m", "--image-model", "image.m", "--train", "s/train.ner", "--text-contexts",
            "text.ctx", "--image-contexts", "image.ctx", "--images", "s/query_images.tsv", "--out", "b.moe",
        ],
    );
    let predict = [
        "predict", "--model", "b.moe", "--data", "s/train.ner", "--text-contexts", "text.ctx", "--image-contexts",
        "image.ctx", "--images", "s/query_images.tsv", "--out", "p.ner",
    ];
    ok(d, &predict);
    ok(d, &["evaluate", "--pred", "p.ner", "--gold", "s/train.ner"]);

    let mut bytes = std::fs::read(d.join("image.m")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(d.join("image.m"), bytes).unwrap();
    assert!(error_line(&rakie(d, &predict)).starts_with("error: E_CHECKSUM: "));
}
