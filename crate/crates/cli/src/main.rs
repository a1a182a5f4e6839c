use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use gsntk_cli::config::{Config, Scale};
use gsntk_cli::output::write_run;
use gsntk_cli::{CliError, Experiment};

#[derive(Parser)]
#[command(name = "gsntk", version, about = "Global-state NTK checks and experiments")]
struct Args {
    #[arg(value_enum)]
    experiment: Experiment,
    /// TOML config, or a config.json written by an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// A seed `N` or an inclusive range `A..B`; overrides the config seed.
    #[arg(long)]
    seed: Option<String>,
    /// Output directory; defaults to `results/<experiment>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    scale: Option<Scale>,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("--seed: expected N or A..B, got {s:?}"));
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![s.trim().parse().map_err(|_| bad())?]),
    }
}

fn run(args: Args) -> Result<bool, CliError> {
    let cfg = match &args.config {
        Some(p) => Config::load(p, args.scale)?,
        None => Config::for_scale(args.scale.unwrap_or(Scale::Desk)),
    };
    let seeds = match &args.seed {
        Some(s) => parse_seeds(s)?,
        None => vec![cfg.seed],
    };
    cfg.validate()?;
    let id = args.experiment.id();
    let out = args.out.unwrap_or_else(|| PathBuf::from("results").join(id));
    let mut all_passed = true;
    for &seed in &seeds {
        let dir = if seeds.len() == 1 { out.clone() } else { out.join(format!("seed{seed}")) };
        let start = Instant::now();
        let result = args.experiment.run(&cfg, seed)?;
        let wall = start.elapsed().as_secs_f64();
        write_run(&dir, id, &cfg, seed, &result, wall)?;
        println!("{id} seed {seed} ({wall:.1} s) -> {}", dir.display());
        for c in &result.checks {
            println!("  {} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        all_passed &= result.passed();
    }
    Ok(all_passed)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
