//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion fails that is not listed in `KNOWN_GAPS`.
//!
//! Runs on the desk-scale defaults; expect about 20 minutes on one core.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use gsntk_cli::config::Config;
use gsntk_cli::output::write_run;
use gsntk_cli::{Experiment, RunOutput};

/// Criteria that fail at desk scale for reasons recorded with the project
/// notes. They are still run and reported.
const KNOWN_GAPS: &[&str] = &[];

struct Line {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn run(exp: Experiment, cfg: &Config, seed: u64) -> (RunOutput, f64) {
    let t = Instant::now();
    let out = exp
        .run(cfg, seed)
        .unwrap_or_else(|e| panic!("{} seed {seed} failed to run: {e}", exp.id()));
    (out, t.elapsed().as_secs_f64())
}

/// All named checks pass; detail lists the failing ones.
fn checks(out: &RunOutput, names: &[&str]) -> (bool, String) {
    let mut bad = Vec::new();
    for n in names {
        match out.check(n) {
            Some(c) if c.passed => {}
            Some(c) => bad.push(format!("{n}: {}", c.detail)),
            None => bad.push(format!("{n}: missing")),
        }
    }
    (bad.is_empty(), bad.join(" | "))
}

fn summary(out: &RunOutput, names: &[&str]) -> String {
    names
        .iter()
        .filter_map(|n| out.check(n).map(|c| format!("{n}: {}", c.detail)))
        .collect::<Vec<_>>()
        .join(" | ")
}

fn line(name: &'static str, passed: bool, detail: String) -> Line {
    Line { name, passed, detail }
}

fn criterion(name: &'static str, out: &RunOutput, names: &[&str], extra: Option<(bool, String)>) -> Line {
    let (mut ok, fail) = checks(out, names);
    let mut detail = if ok { summary(out, names) } else { fail };
    if let Some((e, d)) = extra {
        ok &= e;
        detail = format!("{detail} | {d}");
    }
    line(name, ok, detail)
}

/// Writes every table of two runs and compares the bytes.
fn identical(exp: Experiment, cfg: &Config, seed: u64, root: &Path) -> (bool, String) {
    let mut dirs = Vec::new();
    for rep in 0..2 {
        let dir = root.join(format!("{}-{rep}", exp.id()));
        let (out, wall) = run(exp, cfg, seed);
        write_run(&dir, exp.id(), cfg, seed, &out, wall).expect("write run");
        dirs.push(dir);
    }
    let mut names: Vec<String> = fs::read_dir(&dirs[0])
        .expect("run dir")
        .map(|e| e.expect("entry").file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    names.sort();
    let differ: Vec<&String> = names
        .iter()
        .filter(|n| fs::read(dirs[0].join(n)).ok() != fs::read(dirs[1].join(n)).ok())
        .collect();
    (differ.is_empty(), format!("{}: {} files, differing {:?}", exp.id(), names.len(), differ))
}

/// Small configs so every experiment can be run twice.
fn small_config() -> Config {
    let mut c = Config::default();
    c.core_alignment.iterations = 20;
    c.core_alignment.checkpoints = 2;
    c.selfref.iterations = 20;
    c.selfref.checkpoints = 2;
    c.selfref.seeds_per_run = 1;
    c.rank_regimes.gains = vec![1.0, 3.0];
    c.rank_regimes.input_ranks = vec![1, 16];
    c.transformer_rank.n_x = vec![5];
    c.transformer_rank.n_in = vec![1, 4];
    c.transformer_rank.frequencies = vec![0, 2];
    c.transformer_rank.widths = vec![8];
    c.transformer_rank.width_n_in = vec![1];
    c.transformer_rank.mode_n_attn = 8;
    c.transformer_rank.mode_n_mlp = 8;
    c.transformer_rank.mode_layers = 2;
    c.ntfp.steps = 300;
    c.ntfp.window = 100;
    c
}

fn main() -> ExitCode {
    let cfg = Config::default();
    let mut lines = Vec::new();

    let (v, wall) = run(Experiment::Verify, &cfg, 0);
    lines.push(criterion(
        "kronecker core equality (direct vs lifted)",
        &v,
        &["core_equality", "core_equality_desk_probe"],
        Some((wall < 60.0, format!("verify wall time {wall:.1} s"))),
    ));
    lines.push(criterion("jacobian gram oracle", &v, &["jacobian_gram_oracle", "jacobian_fd_oracle"], None));
    lines.push(criterion("adjoint filter identity", &v, &["adjoint_filter_identity"], None));
    lines.push(criterion("space-time rank bottleneck", &v, &["space_time_bottleneck"], None));
    lines.push(criterion("analytic derivatives vs finite differences", &v, &["gradient_checks"], None));
    lines.push(criterion(
        "estimator accuracy",
        &v,
        &["hutchpp_low_rank_exact", "hutchpp_random_psd", "partial_average", "topk_eigs"],
        None,
    ));

    let (n, wall) = run(Experiment::Ntfp, &cfg, 0);
    lines.push(criterion(
        "fixed-point construction and endpoint clusters",
        &n,
        &["fixed_point_residual", "cluster_counts"],
        Some((wall < 120.0, format!("wall time {wall:.1} s"))),
    ));

    let rank_checks = ["input_rank_spearman", "spatial_collapse", "temporal_interior_max"];
    let (mut ok, mut detail) = (true, Vec::new());
    for seed in 0..3 {
        let (r, _) = run(Experiment::RankRegimes, &cfg, seed);
        let (p, d) = checks(&r, &rank_checks);
        ok &= p;
        detail.push(if p { format!("seed {seed} ok") } else { format!("seed {seed}: {d}") });
    }
    lines.push(line("gain and input-rank regimes (3 seeds)", ok, detail.join("; ")));

    let (t, _) = run(Experiment::TransformerRank, &cfg, 0);
    lines.push(criterion(
        "attention temporal bottleneck trends",
        &t,
        &["core_rank_bound", "temporal_rank_vs_n_in", "temporal_rank_vs_fourier", "single_dominant_mode"],
        None,
    ));

    let (s, _) = run(Experiment::Selfref, &cfg, 0);
    let (c, _) = run(Experiment::CoreAlignment, &cfg, 0);
    let (cp, cd) = checks(&c, &["core_beats_random_psd"]);
    lines.push(criterion(
        "self-referential bias and core alignment",
        &s,
        &["n1_init_mode3_ratio", "n2_init_mode3_gain", "final_loss_ordering", "n1_mode3_stall", "n2_learned_modes"],
        Some((cp, if cp { summary(&c, &["core_beats_random_psd"]) } else { cd })),
    ));

    let small = small_config();
    let root = tempfile::tempdir().expect("temp dir");
    let (mut ok, mut detail) = (true, Vec::new());
    for exp in [
        Experiment::Verify,
        Experiment::CoreAlignment,
        Experiment::Selfref,
        Experiment::RankRegimes,
        Experiment::TransformerRank,
        Experiment::Ntfp,
    ] {
        let (p, d) = identical(exp, &small, 3, root.path());
        ok &= p;
        detail.push(d);
    }
    lines.push(line("determinism under a fixed seed", ok, detail.join("; ")));

    let mut unexpected = 0;
    for l in &lines {
        let tag = if l.passed { "PASS" } else { "FAIL" };
        let known = !l.passed && KNOWN_GAPS.contains(&l.name);
        unexpected += usize::from(!l.passed && !known);
        println!("{tag} {}{} :: {}", l.name, if known { " (known gap)" } else { "" }, l.detail);
    }
    let passed = lines.iter().filter(|l| l.passed).count();
    println!("acceptance: {passed}/{} criteria passed", lines.len());
    if unexpected > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
