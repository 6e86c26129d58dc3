use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn d3(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d3"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_DATA: &[&str] = &["n=12", "size=16", "pseudo_fraction=0.25"];
const TINY_NET: &[&str] = &["net.base_channels=4", "net.depth_levels=2", "net.taps=0,1", "net.embed_dim=8"];

fn gen(dir: &Path, out: &str, seed: &str) {
    let mut args = vec!["gen-data", "--out", out, "--seed", seed];
    args.extend_from_slice(TINY_DATA);
    let o = d3(dir, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

/// Generate, pretrain and train a tiny student; returns the checkpoint path.
fn tiny_pipeline(dir: &Path) -> String {
    gen(dir, "data", "7");
    let mut args = vec![
        "pretrain", "--data", "data", "--out", "teacher", "--seed", "1", "steps=6", "warmup_steps=1", "batch_size=4",
    ];
    args.extend_from_slice(TINY_NET);
    let o = d3(dir, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = d3(
        dir,
        &[
            "train",
            "--data",
            "data",
            "--teacher",
            "teacher/teacher.d3ck",
            "--out",
            "student",
            "steps=4",
            "warmup_steps=1",
            "batch_size=4",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    "student/student.d3ck".into()
}

#[test]
fn gen_data_is_byte_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "a", "7");
    gen(tmp.path(), "b", "7");
    gen(tmp.path(), "c", "8");
    let read = |d: &str, f: &str| fs::read(tmp.path().join(d).join(f)).unwrap();
    for f in ["manifest.tsv", "sources.tsv", "config.txt", "clean/sample_00000.dpr", "pseudo/sample_00011.dpr"] {
        assert_eq!(read("a", f), read("b", f), "{f}");
    }
    assert_ne!(read("a", "clean/sample_00000.dpr"), read("c", "clean/sample_00000.dpr"));
    let listing = String::from_utf8(read("a", "manifest.tsv")).unwrap();
    assert_eq!(listing.lines().count(), 12 + 1);
    // A rerun into the same directory reproduces it exactly.
    gen(tmp.path(), "a", "7");
    assert_eq!(read("a", "clean/sample_00003.dpr"), read("b", "clean/sample_00003.dpr"));
}

#[test]
fn config_errors_exit_2_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["gen-data", "--out", "x", "n=0"][..],
        &["gen-data", "--out", "x", "data.unknown=1"],
        &["gen-data", "--out", "x", "--no-such-flag"],
        &["gen-data", "--out", "x", "not-a-pair"],
        &["eval", "--out", "x", "--data", "d", "--predictions", "d", "--align", "maybe"],
    ] {
        let o = d3(tmp.path(), args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
    let o = d3(tmp.path(), &["gen-data", "--out", "x", "n=0"]);
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);
}

#[test]
fn config_file_is_read_and_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.cfg"), "data.n=3\ndata.size=16\n# comment\n").unwrap();
    let o = d3(tmp.path(), &["gen-data", "--config", "run.cfg", "--out", "d", "--seed", "5", "n=4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echoed = fs::read_to_string(tmp.path().join("d/config.txt")).unwrap();
    assert!(echoed.contains("data.n=4\n"));
    assert!(echoed.contains("data.size=16\n"));
    assert!(echoed.contains("seed=5\n"));
    assert_eq!(fs::read_dir(tmp.path().join("d/clean")).unwrap().count(), 4);
}

#[test]
fn every_command_documents_its_flags() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["gen-data", "pretrain", "train", "predict", "eval", "report"] {
        let o = d3(tmp.path(), &[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let help = String::from_utf8(o.stdout).unwrap();
        assert!(help.contains("--seed"), "{cmd}");
        assert!(help.contains("--out"), "{cmd}");
    }
}

#[test]
fn pipeline_predicts_deterministically_and_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ckpt = tiny_pipeline(dir);
    let log = fs::read_to_string(dir.join("student/train.log")).unwrap();
    assert_eq!(log.lines().count(), 4 + 1);

    for out in ["p1", "p2"] {
        let o = d3(dir, &["predict", "--checkpoint", &ckpt, "--input", "data/clean/sample_00000.dpr", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = fs::read(dir.join("p1/sample_00000.dpr")).unwrap();
    assert_eq!(a, fs::read(dir.join("p2/sample_00000.dpr")).unwrap());
    assert!(dir.join("p1/sample_00000.png").exists());

    // PNG input goes through the same path.
    let o = d3(dir, &["predict", "--checkpoint", &ckpt, "--input", "p1/sample_00000.png", "--out", "p3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = d3(dir, &["eval", "--data", "data", "--checkpoint", &ckpt, "--out", "eval"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("NFE       1 × 1"), "{stdout}");

    let o = d3(dir, &["report", "gt=eval/metrics.txt", "--out", "table.txt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(dir.join("table.txt")).unwrap().contains("Average Rank"));
}

#[test]
fn ground_truth_as_predictions_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "data", "3");
    let o = d3(tmp.path(), &["eval", "--data", "data", "--predictions", "data", "--out", "e"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let kv = fs::read_to_string(tmp.path().join("e/metrics.txt")).unwrap();
    assert!(kv.contains("absrel=0\n"), "{kv}");
    assert!(kv.contains("delta1=1\n"), "{kv}");
}

#[test]
fn zero_lambda_exits_2_and_divergence_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_pipeline(dir);
    let base = ["train", "--data", "data", "--teacher", "teacher/teacher.d3ck", "--out", "bad"];
    let o = d3(dir, &[&base[..], &["lambda=0"]].concat());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = d3(
        dir,
        &[&base[..], &["steps=5", "warmup_steps=1", "batch_size=4", "learning_rate=1e30"]].concat(),
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn io_and_format_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = d3(dir, &["predict", "--checkpoint", "missing.d3ck", "--input", "x.png", "--out", "p"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    fs::write(dir.join("junk.d3ck"), b"not a checkpoint").unwrap();
    let o = d3(dir, &["predict", "--checkpoint", "junk.d3ck", "--input", "x.png", "--out", "p"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = d3(dir, &["pretrain", "--data", "nowhere", "--out", "t"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}
