use std::fs;
use std::path::Path;
use std::process::Command;

use gsntk_cli::config::{Config, Scale};
use gsntk_cli::stats::{average_ranks, spearman};
use gsntk_cli::CliError;

const SMALL_NTFP: &str = "[ntfp]\nn_h = 32\npoints = [0, 1]\ngains = [1.0]\nstarts = 6\nsteps = 200\nwindow = 50\nsample_stride = 50\norigin_tol = 10.0\n";

fn gsntk(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gsntk")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_key_is_a_config_error_with_line() {
    let err = Config::parse("seed = 1\n[ntfp]\nn_hh = 3\n", false, None).unwrap_err();
    match err {
        CliError::Config(m) => assert!(m.contains("line 3"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn paper_scale_keeps_explicit_values() {
    let cfg = Config::parse("[selfref]\niterations = 7\n", false, Some(Scale::Paper)).unwrap();
    assert_eq!(cfg.scale, Scale::Paper);
    assert_eq!(cfg.selfref.iterations, 7);
    assert_eq!(cfg.selfref.task.n_h, 256);
    assert_eq!(cfg.rank_regimes.n_t, 40);
    let desk = Config::parse("scale = \"desk\"\n", false, None).unwrap();
    assert_eq!(desk, Config::default());
}

#[test]
fn config_round_trips_through_json() {
    let mut cfg = Config::for_scale(Scale::Paper);
    cfg.seed = 11;
    cfg.ntfp.cluster_distance = Some(2.5);
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(Config::parse(&text, true, None).unwrap(), cfg);
}

#[test]
fn invalid_values_are_rejected() {
    let cfg = Config::parse("[rank-regimes]\ninput_ranks = [0]\n", false, None).unwrap();
    assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    let cfg = Config::parse("[ntfp]\nwindow = 5000\n", false, None).unwrap();
    assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[ntfp]\nsteps = \"many\"\n");
    let out = gsntk(&["ntfp", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = gsntk(&["ntfp", "--seed", "3..1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = gsntk(&["no-such-experiment"]);
    assert_eq!(out.status.code(), Some(2));
    let out = gsntk(&["ntfp", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ntfp_run_writes_tables_and_reloadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL_NTFP);
    let first = dir.path().join("first");
    let out = gsntk(&["ntfp", "--config", &cfg, "--seed", "4", "--out", first.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["endpoints.csv", "trajectories.csv", "results.csv", "checks.csv", "config.json", "manifest.json"] {
        assert!(first.join(f).exists(), "{f}");
    }
    let endpoints = fs::read_to_string(first.join("endpoints.csv")).unwrap();
    assert!(endpoints.starts_with("m,g,start,cluster,pc1,pc2,pc3,final_norm\n"));
    assert_eq!(endpoints.lines().count(), 1 + 2 * 6);

    let snapshot = first.join("config.json");
    let reloaded = Config::load(&snapshot, None).unwrap();
    assert_eq!(reloaded.seed, 4);
    let second = dir.path().join("second");
    let out = gsntk(&["ntfp", "--config", snapshot.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    for f in ["endpoints.csv", "trajectories.csv", "results.csv", "checks.csv", "config.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 4);
}

#[test]
fn seed_range_writes_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL_NTFP);
    let out_dir = dir.path().join("runs");
    let out = gsntk(&["ntfp", "--config", &cfg, "--seed", "1..3", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let mut seen = Vec::new();
    for s in 1..=3 {
        let d = out_dir.join(format!("seed{s}"));
        let c = Config::load(&d.join("config.json"), None).unwrap();
        assert_eq!(c.seed, s);
        seen.push(fs::read(d.join("endpoints.csv")).unwrap());
    }
    assert_ne!(seen[0], seen[1]);
}

#[test]
fn failed_check_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // A residual tolerance no construction can meet.
    let cfg = write(dir.path(), "strict.toml", &format!("{SMALL_NTFP}max_residual = -1.0\n"));
    let out = gsntk(&["ntfp", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL fixed_point_residual"));
}

#[test]
fn ranks_average_ties() {
    assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-15);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), 0.0);
}
