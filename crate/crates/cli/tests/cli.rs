use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hausr"));
    c.env("RUST_LOG", "warn");
    c
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn run(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn help_exits_zero_for_every_command() {
    for args in [
        vec!["--help"],
        vec!["collect", "--help"],
        vec!["pretrain", "--help"],
        vec!["train", "--help"],
        vec!["eval", "--help"],
        vec!["transfer", "--help"],
    ] {
        let o = bin().args(&args).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{args:?}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(bin().arg("nonsense").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["collect", "--seed", "x"]).output().unwrap().status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[pretrain]\nstepz = 3\n").unwrap();
    let o = run(&cfg, dir.path(), &["collect"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));
}

#[test]
fn missing_artifacts_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["pretrain", "train", "eval", "transfer"] {
        let o = run(&tiny_config(), dir.path(), &[cmd]);
        assert!(!o.status.success(), "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("missing artifact"), "{cmd}");
    }
}

#[test]
fn collect_is_seeded_and_sized() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    ok(&run(&tiny_config(), a.path(), &["collect"]));
    ok(&run(&tiny_config(), b.path(), &["collect"]));
    ok(&run(&tiny_config(), c.path(), &["collect", "--seed", "8"]));
    let ra = std::fs::read(a.path().join("rollouts.hroll")).unwrap();
    let rb = std::fs::read(b.path().join("rollouts.hroll")).unwrap();
    let rc = std::fs::read(c.path().join("rollouts.hroll")).unwrap();
    assert_eq!(ra, rb);
    assert_ne!(ra, rc);
    // 2 goals x 200 transitions
    let count = u64::from_le_bytes(ra[14..22].try_into().unwrap());
    assert_eq!(count, 400);
    assert_eq!(ra.len(), 22 + 400 * 22);
}

#[test]
fn full_pipeline_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    for cmd in ["collect", "pretrain", "train", "eval", "transfer"] {
        ok(&run(&tiny_config(), dir.path(), &[cmd]));
    }
    assert!(start.elapsed() < Duration::from_secs(600));
    for f in [
        "rollouts.hroll",
        "repnet.ckpt",
        "omega.ckpt",
        "pretrain_loss.csv",
        "agent.ckpt",
        "train_log.csv",
        "eval.csv",
        "eval.svg",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let transfer: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("transfer_"))
        .collect();
    assert_eq!(transfer.len(), 3, "{transfer:?}");
    let eval = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    // 2 training goals + 3 held-out
    assert_eq!(eval.lines().count(), 1 + 5);
}

#[test]
fn tabular_flag_and_explicit_transfer_goal() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["collect", "pretrain", "train"] {
        ok(&run(&tiny_config(), dir.path(), &["--tabular", cmd]));
    }
    let o = run(&tiny_config(), dir.path(), &["--tabular", "transfer", "--goal", "1,1,N"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("transfer to goal"));
    // pixel networks cannot load the tabular checkpoint
    let o = run(&tiny_config(), dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&tiny_config(), dir.path(), &["--tabular", "transfer", "--goal", "0,0,N"]);
    assert_eq!(o.status.code(), Some(2));
}
