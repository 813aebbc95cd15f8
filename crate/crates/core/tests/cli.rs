use std::path::{Path, PathBuf};
use std::process::Command;

use adasde::config::{load_config, parse_config, ExperimentKind};
use adasde::error::{ConfigErrors, Error};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adasde"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const WARMUP: &str = r#"
kind = "warmup-check"
seeds = 500
[warmup]
g_bar = [1.0, -0.5]
sigma = 100.0
eta = 0.01
k = 50
"#;

#[test]
fn shipped_configs_parse() {
    let mut kinds = Vec::new();
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(cfg.kind.name(), path.file_stem().unwrap().to_str().unwrap());
        kinds.push(cfg.kind);
    }
    for k in ExperimentKind::ALL {
        assert!(kinds.contains(&k), "no config for {k}");
    }
}

#[test]
fn every_error_is_listed() {
    let text = r#"
kind = "run"
colour = "blue"
[problem]
type = "quadratic"
a = [[1.0]]
[noise]
type = "gaussian"
sigma = -1.0
[optimizer]
algorithm = "adam"
eta = 0.1
beta1 = 1.5
beta2 = 0.9
theta0 = [1.0, 2.0]
steps = 5
"#;
    let Err(Error::Config(ConfigErrors(errs))) = parse_config(text) else {
        panic!("expected errors")
    };
    assert!(errs.iter().any(|e| e.contains("`colour`")), "{errs:?}");
    assert!(errs.iter().any(|e| e.contains("beta1")), "{errs:?}");
    assert!(errs.iter().any(|e| e.contains("theta0")), "{errs:?}");
    assert!(errs.len() >= 3);
}

#[test]
fn cli_is_deterministic_and_fingerprinted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "w.toml", WARMUP);
    let fp = parse_config(WARMUP).unwrap().fingerprint;
    let run = |out: &str| {
        let out = dir.path().join(out);
        let status = bin()
            .args(["warmup-check", "--config"])
            .arg(&cfg)
            .args(["--seed", "7", "--jobs", "1", "--out-dir"])
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(
            status.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    for (_, bytes) in &a {
        assert!(String::from_utf8_lossy(bytes).contains(&fp));
    }
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "w.toml", WARMUP);
    let out = dir.path().join("env-out");
    let status = bin()
        .args(["warmup-check", "--config"])
        .arg(&cfg)
        .env("ADASDE_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(out.join("warmup-check.json").exists());
}

#[test]
fn exit_codes_for_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.toml",
        &WARMUP.replace("eta = 0.01", "eta = 0.01\nspeed = 3"),
    );
    let out = bin().args(["warmup-check", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup.speed"));

    let good = write(dir.path(), "good.toml", WARMUP);
    let out = bin().args(["run", "--config"]).arg(&good).output().unwrap();
    assert_eq!(out.status.code(), Some(4), "kind mismatch");

    let missing = bin()
        .args(["run", "--config"])
        .arg(dir.path().join("nope.toml"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));

    // An existing file where the output directory should go.
    let blocker = write(dir.path(), "blocker", "");
    let out = bin()
        .args(["warmup-check", "--config"])
        .arg(&good)
        .arg("--out-dir")
        .arg(&blocker)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}
