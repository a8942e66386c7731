//! Command-line behaviour: argument handling, seeding and small commands.

use std::path::Path;
use std::process::{Command, Output};

fn oodseg(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodseg"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(
        &p,
        "[data]\nn_train = 2\nn_test = 2\nimage_size = 16\n[flow]\ncrop = 8\nhidden = 8\nsteps_per_level = 1\npretrain_epochs = 1\n[joint]\npatch_min = 4\npatch_max = 8\n",
    )
    .unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_lists_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = oodseg(dir.path(), &["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["generate", "pretrain-cls", "pretrain-flow", "joint-train", "score", "evaluate", "ablate"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn generation_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = oodseg(&out, &["--config", &cfg, "--seed", seed, "generate"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let mut files: Vec<_> = std::fs::read_dir(out.join("train")).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|f| std::fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    let (a, b, c) = (run("a", "5"), run("b", "5"), run("c", "6"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn curves_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let o = oodseg(dir.path(), &["curves", "--resolution", "11"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "p,kl,rkl,js");
    assert_eq!(csv.lines().count(), 12);
    assert!(dir.path().join("curves.png").exists());
}

#[test]
fn malformed_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[data\nn_train = ").unwrap();
    let o = oodseg(dir.path(), &["--config", &p.to_string_lossy(), "generate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = oodseg(dir.path(), &["samples", "--flow", "does-not-exist.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does-not-exist.ckpt"));
}

#[test]
fn unknown_score_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = oodseg(dir.path(), &["score", "--classifier", "c.ckpt", "--data", "d.toml", "--kind", "entropy"]);
    assert!(!o.status.success());
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let d = |s: &str| dir.path().join(s);
    let s = |s: &str| d(s).to_string_lossy().into_owned();
    let ok = |out: &str, args: &[&str]| {
        let mut full = vec!["--config", cfg.as_str()];
        full.extend_from_slice(args);
        let o = oodseg(&d(out), &full);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };
    ok("data", &["generate"]);
    ok("flow", &["pretrain-flow", "--train", &s("data/train.toml")]);
    ok("samples", &["samples", "--flow", &s("flow/flow.ckpt"), "--rows", "2", "--cols", "2", "--height", "8", "--width", "12"]);
    assert!(d("samples/samples.png").exists());
    // resuming with a checkpoint in place leaves it untouched
    let before = std::fs::read(d("flow/flow.ckpt")).unwrap();
    ok("flow", &["pretrain-flow", "--train", &s("data/train.toml"), "--resume"]);
    assert_eq!(before, std::fs::read(d("flow/flow.ckpt")).unwrap());
}
