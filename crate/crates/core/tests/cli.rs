//! The `ssl-desk` binary: subcommands, output files and exit codes.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::tiny_experiment;
use ssl_desk::Method;

fn ssl_desk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssl-desk")).args(args).output().unwrap()
}

fn write_config(dir: &Path, preset: Method) -> String {
    let cfg = tiny_experiment(preset, vec![0], &dir.join("out"));
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_then_probe_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), Method::Byol);
    let out = dir.path().join("run");
    let run = ssl_desk(&["run", "--config", &config, "--seed-list", "3,4", "--out", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout(&run).contains("seed 4: top1"));
    for f in ["results.csv", "results.json", "resolved_config.toml", "seed-3/loss.csv", "seed-4/checkpoint.bin"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let ckpt = out.join("seed-3/checkpoint.bin");
    let probe = ssl_desk(&["probe", "--config", &config, "--seed-list", "3", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(probe.status.code(), Some(0), "{}", String::from_utf8_lossy(&probe.stderr));
    assert!(stdout(&probe).starts_with("top1 "));
}

#[test]
fn overrides_reach_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), Method::SimClr);
    let out = dir.path().join("o");
    let run = ssl_desk(&[
        "run",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--override",
        "augmentation=crop",
        "--override",
        "probe.epochs=1",
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let resolved = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("augmentation = \"crop\""));
    assert!(resolved.contains("epochs = 1"));
}

#[test]
fn grid_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), Method::SimClr);
    let out = dir.path().join("grid");
    let grid = ssl_desk(&["grid", "--kind", "algorithms", "--presets", "simclr", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(grid.status.code(), Some(0), "{}", String::from_utf8_lossy(&grid.stderr));
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(stdout(&grid).contains("predictor=yes momentum=yes"));
}

#[test]
fn augment_dump_writes_ppm_views() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), Method::Swav);
    let out = dir.path().join("dump");
    let dump = ssl_desk(&["augment-dump", "--config", &config, "--count", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(dump.status.code(), Some(0), "{}", String::from_utf8_lossy(&dump.stderr));
    let ppm = std::fs::read(out.join("image1-view11.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n4 4\n255\n"));
    assert_eq!(ppm.len(), "P6\n4 4\n255\n".len() + 4 * 4 * 3);
}

#[test]
fn selftest_passes() {
    let o = ssl_desk(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ssl_desk(&["run", "--config", "/nonexistent/config.toml"]).status.code(), Some(2));
    assert_eq!(ssl_desk(&["run"]).status.code(), Some(2));
    assert_eq!(ssl_desk(&["run", "--bogus"]).status.code(), Some(2));
    let config = write_config(dir.path(), Method::SimClr);
    assert_eq!(ssl_desk(&["run", "--config", &config, "--override", "preset=simsiam"]).status.code(), Some(2));
    assert_eq!(ssl_desk(&["run", "--config", &config, "--seed-list", "1,1"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), Method::SimClr);
    let out = dir.path().join("nan");
    let o = ssl_desk(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--override", "desk.lr_multiplier=1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
}
