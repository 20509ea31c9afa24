use std::path::Path;
use std::process::{Command, Output};

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokenhorizon"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A briefly trained double-precision checkpoint in `dir`.
fn tiny_checkpoint(dir: &Path) -> String {
    let o = run(dir, &["train", "--preset", "small", "--steps", "5", "--precision", "double", "--name", "tiny"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("tiny.ckpt").to_string_lossy().into_owned()
}

#[test]
fn flops_prints_the_calibrated_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["flops", "--schedule", "none", "--schedule", "dart-random-64"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("dart-random-64"), "{text}");
    let csv = std::fs::read_to_string(dir.path().join("flops.csv")).unwrap();
    assert!(csv.starts_with("method,tokens,flops_T,storage_MB"));
    assert!(dir.path().join("flops.manifest.toml").exists());
}

#[test]
fn reduction_assertions_set_their_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(dir.path(), &["--force", "flops", "--schedule", "dart-random-64", "--expect-reduction", "74.4"]);
    assert_eq!(ok.status.code(), Some(0));
    let bad = run(dir.path(), &["--force", "flops", "--schedule", "dart-random-64", "--expect-reduction", "20"]);
    assert_eq!(bad.status.code(), Some(4));
}

#[test]
fn existing_outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["flops"]).status.success());
    assert_eq!(run(dir.path(), &["flops"]).status.code(), Some(6));
    assert!(run(dir.path(), &["--force", "flops"]).status.success());
}

#[test]
fn usage_and_file_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(dir.path(), &["profile", "--checkpoint", "absent.ckpt"]);
    assert_eq!(missing.status.code(), Some(5));
    let zero = run(dir.path(), &["train", "--steps", "0"]);
    assert_eq!(zero.status.code(), Some(2));
    let unknown = run(dir.path(), &["sweep", "no-such-experiment", "--checkpoint", "x.ckpt"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("withdraw"));
    let arch = run(dir.path(), &["flops", "--arch", "gpt-9"]);
    assert_eq!(arch.status.code(), Some(2));
}

#[test]
fn tau_of_one_puts_the_horizon_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let o = run(dir.path(), &["profile", "--checkpoint", &ck, "--samples", "4", "--tau", "1.0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("detected horizon: 0"), "{}", stdout(&o));
    let profile = std::fs::read_to_string(dir.path().join("profile.csv")).unwrap();
    assert!(profile.lines().count() > 1);
}

#[test]
fn replay_reproduces_gen_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = run(a.path(), &["gen-data", "--task", "majority", "--samples", "30", "--heldout", "5", "--name", "m"]);
    assert!(o.status.success());
    let manifest = a.path().join("m.manifest.toml");
    assert!(run(b.path(), &["replay", manifest.to_str().unwrap()]).status.success());
    for f in ["m.train.data", "m.heldout.data"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}
