use std::path::Path;
use std::process::{Command, Output};

fn ffscope(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffscope"))
        .current_dir(dir)
        .env_remove("FFSCOPE_OUT")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

const TINY: &[&str] = &["--layers", "1", "--d-model", "8", "--vocab", "16", "--heads", "2", "--max-seq-len", "8"];

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth"];
    args.extend_from_slice(extra);
    args.extend_from_slice(TINY);
    ffscope(dir, &args)
}

#[test]
fn version_prints_name_and_number() {
    let dir = tempfile::tempdir().unwrap();
    let out = ffscope(dir.path(), &["version"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.trim(), format!("ffscope {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ffscope(dir.path(), &["bogus"]).status.code(), Some(1));
    assert_eq!(ffscope(dir.path(), &["scan", "--threads", "0"]).status.code(), Some(1));
    std::fs::write(dir.path().join("c.json"), r#"{"unknown_flag": 1}"#).unwrap();
    assert_eq!(ffscope(dir.path(), &["--config", "c.json", "version"]).status.code(), Some(1));
}

#[test]
fn bad_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.ffw"), b"not a model").unwrap();
    std::fs::create_dir(dir.path().join("src")).unwrap();
    std::fs::write(dir.path().join("src/a.py"), "x = 1\n").unwrap();
    let out = ffscope(dir.path(), &["scan", "--model", "bad.ffw", "--corpus", "src", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn out_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(synth(d, &[]).status.success());
    assert!(d.join("ffscope-out/model.ffw").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_ffscope"))
        .current_dir(d)
        .env("FFSCOPE_OUT", "from_env")
        .arg("synth")
        .args(TINY)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("from_env/model.ffw").exists());

    std::fs::write(d.join("c.json"), r#"{"out": "from_config", "seed": 9}"#).unwrap();
    assert!(synth(d, &["--config", "c.json"]).status.success());
    assert!(d.join("from_config/model.ffw").exists());

    assert!(synth(d, &["--config", "c.json", "--out", "from_flag"]).status.success());
    assert!(d.join("from_flag/model.ffw").exists());
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), r#"{"seed": 9}"#).unwrap();
    let print = |extra: &[&str]| String::from_utf8(synth(d, extra).stdout).unwrap();
    let from_config = print(&["--config", "c.json"]);
    let from_flag = print(&["--seed", "9"]);
    let overridden = print(&["--config", "c.json", "--seed", "10"]);
    let flag_ten = print(&["--seed", "10"]);
    assert_eq!(from_config, from_flag);
    assert_eq!(overridden, flag_ten);
    assert_ne!(from_config, overridden);
}
