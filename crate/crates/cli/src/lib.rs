//! Experiment runners for the global-state NTK toolkit.
//!
//! Every experiment is a pure function of `(Config, seed)` returning result
//! tables and a list of checks; [`output`] writes them with the config and a
//! manifest.

pub mod config;
pub mod memorypro;
pub mod ntfp;
pub mod output;
pub mod rank_regimes;
pub mod stats;
pub mod transformer;
pub mod verify;

use config::Config;
use output::Table;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] gsntk::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Outcome of one assertion made by an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn table(&self, file: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.file == file)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Experiment {
    Verify,
    CoreAlignment,
    Selfref,
    RankRegimes,
    TransformerRank,
    Ntfp,
}

impl Experiment {
    pub fn id(self) -> &'static str {
        match self {
            Experiment::Verify => "verify",
            Experiment::CoreAlignment => "core-alignment",
            Experiment::Selfref => "selfref",
            Experiment::RankRegimes => "rank-regimes",
            Experiment::TransformerRank => "transformer-rank",
            Experiment::Ntfp => "ntfp",
        }
    }

    pub fn run(self, cfg: &Config, seed: u64) -> Result<RunOutput, CliError> {
        cfg.validate()?;
        match self {
            Experiment::Verify => verify::run(&cfg.verify, seed),
            Experiment::CoreAlignment => memorypro::core_alignment(&cfg.core_alignment, seed),
            Experiment::Selfref => memorypro::selfref(&cfg.selfref, seed),
            Experiment::RankRegimes => rank_regimes::run(&cfg.rank_regimes, seed),
            Experiment::TransformerRank => transformer::run(&cfg.transformer_rank, seed),
            Experiment::Ntfp => ntfp::run(&cfg.ntfp, seed),
        }
    }
}
