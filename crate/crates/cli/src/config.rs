//! Experiment configuration.
//!
//! A config file is TOML (or the JSON written next to every run). Top-level
//! keys are `seed`, `scale` and one table per experiment; anything not given
//! falls back to the defaults of the selected scale. Unknown keys are errors.
//!
//! ```toml
//! seed = 2
//! scale = "desk"
//!
//! [ntfp]
//! n_h = 96
//! gains = [1.0, 2.0]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainedFamily {
    Rec,
    In,
}

impl TrainedFamily {
    pub fn family(self) -> gsntk::models::Family {
        match self {
            TrainedFamily::Rec => gsntk::models::Family::Rec,
            TrainedFamily::In => gsntk::models::Family::In,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainedFamily::Rec => "rec",
            TrainedFamily::In => "in",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    pub sketch: usize,
    pub residual: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            sketch: 16,
            residual: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub random_errors: usize,
    pub rank_instances: usize,
    pub psd_trials: usize,
    pub psd_dim: usize,
    pub psd_rel_tol: f64,
    pub psd_min_pass: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            random_errors: 20,
            rank_instances: 100,
            psd_trials: 20,
            psd_dim: 500,
            psd_rel_tol: 0.02,
            psd_min_pass: 18,
        }
    }
}

/// Memory-Pro task and the two GRU initializations shared by the
/// core-alignment and selfref experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryProSettings {
    pub n_h: usize,
    /// Trials in the clean evaluation batch (also the NTK batch).
    pub n_x: usize,
    /// Fresh trials drawn for every training step.
    pub train_batch: usize,
    pub phase: usize,
    pub noise_var: f64,
    pub mask_response: bool,
    /// Recurrent gain of both networks.
    pub gain: f64,
    /// Network 2 fixed points `scale * e_i`.
    pub ntfp_points: usize,
    pub ntfp_scale: f64,
}

impl MemoryProSettings {
    fn desk() -> Self {
        Self {
            n_h: 32,
            n_x: 8,
            train_batch: 64,
            phase: 15,
            noise_var: 3.2,
            mask_response: false,
            gain: 1.0,
            ntfp_points: 5,
            ntfp_scale: 3.0,
        }
    }

    fn paper() -> Self {
        Self {
            n_h: 256,
            n_x: 500,
            train_batch: 500,
            phase: 30,
            ..Self::desk()
        }
    }
}

impl Default for MemoryProSettings {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoreAlignmentConfig {
    pub task: MemoryProSettings,
    pub iterations: usize,
    pub lr: f64,
    pub checkpoints: usize,
    pub probes: ProbeSettings,
    /// Temporal modes of the NTK exported per checkpoint.
    pub export_modes: usize,
    pub max_core_modes_95: usize,
    pub max_response_energy: f64,
}

impl CoreAlignmentConfig {
    fn desk() -> Self {
        Self {
            task: MemoryProSettings::desk(),
            iterations: 1000,
            lr: 0.3,
            checkpoints: 4,
            probes: ProbeSettings::default(),
            export_modes: 3,
            max_core_modes_95: 6,
            max_response_energy: 0.05,
        }
    }

    fn paper() -> Self {
        Self {
            task: MemoryProSettings::paper(),
            iterations: 20000,
            lr: 1e-3,
            ..Self::desk()
        }
    }
}

impl Default for CoreAlignmentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfrefConfig {
    pub task: MemoryProSettings,
    pub seeds_per_run: usize,
    pub iterations: usize,
    pub lr: f64,
    pub kfp_lr: f64,
    pub kfp_damping: f64,
    pub checkpoints: usize,
    /// Network 1 mode-3 NTK alignment relative to mode 1, at most.
    pub max_init_ratio: f64,
    /// Network 2 mode-3 NTK alignment relative to Network 1's, at least.
    pub min_init_gain: f64,
    /// Network 1 mode-3 target alignment stays below this under SGD.
    pub stall_threshold: f64,
    /// Network 1 final mode-1 target alignment under SGD, at least.
    pub n1_mode1_threshold: f64,
    /// Modes Network 2 is expected to learn, and the bar they must clear.
    pub learned_modes: Vec<usize>,
    pub learned_threshold: f64,
}

impl SelfrefConfig {
    fn desk() -> Self {
        Self {
            task: MemoryProSettings::desk(),
            seeds_per_run: 3,
            iterations: 2000,
            lr: 0.3,
            kfp_lr: 0.01,
            kfp_damping: 1e-4,
            checkpoints: 4,
            max_init_ratio: 0.1,
            min_init_gain: 10.0,
            stall_threshold: 0.2,
            n1_mode1_threshold: 0.5,
            learned_modes: vec![1],
            learned_threshold: 0.5,
        }
    }

    fn paper() -> Self {
        Self {
            task: MemoryProSettings::paper(),
            iterations: 20000,
            lr: 1e-3,
            kfp_lr: 1e-3,
            ..Self::desk()
        }
    }
}

impl Default for SelfrefConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankRegimesConfig {
    pub families: Vec<TrainedFamily>,
    pub gains: Vec<f64>,
    pub input_ranks: Vec<usize>,
    pub n_in: usize,
    pub n_h: usize,
    pub n_out: usize,
    pub n_t: usize,
    pub batch: usize,
    pub min_spearman: f64,
    /// Gains compared for the spatial collapse, low then high.
    pub spatial_gains: (f64, f64),
}

impl RankRegimesConfig {
    fn desk() -> Self {
        Self {
            families: vec![TrainedFamily::Rec, TrainedFamily::In],
            gains: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
            input_ranks: vec![1, 2, 4, 8, 16],
            n_in: 16,
            n_h: 32,
            n_out: 1,
            n_t: 20,
            batch: 8,
            min_spearman: 0.9,
            spatial_gains: (1.0, 3.0),
        }
    }

    fn paper() -> Self {
        Self {
            n_h: 64,
            n_t: 40,
            batch: 128,
            ..Self::desk()
        }
    }
}

impl Default for RankRegimesConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerRankConfig {
    pub n_t: usize,
    pub n_x: Vec<usize>,
    pub n_in: Vec<usize>,
    pub frequencies: Vec<usize>,
    pub widths: Vec<usize>,
    /// Input dimensions crossed with `widths` in the width sweep.
    pub width_n_in: Vec<usize>,
    pub n_attn: usize,
    pub n_mlp: usize,
    pub layers: usize,
    pub n_out: usize,
    /// Trial count used for the n_in and Fourier sweeps.
    pub base_n_x: usize,
    pub export_modes: usize,
    /// Architecture of the dominant-mode points, which are measured
    /// separately from the sweeps.
    pub mode_n_attn: usize,
    pub mode_n_mlp: usize,
    pub mode_layers: usize,
    pub max_mode_ratio: f64,
    /// Share of the dominant mode's energy in its per-trial time mean, at least.
    pub min_mode_constancy: f64,
    /// Singular values above `rank_tol * sigma_1` count toward rank(V).
    pub rank_tol: f64,
}

impl TransformerRankConfig {
    fn desk() -> Self {
        Self {
            n_t: 20,
            n_x: vec![5, 10, 15],
            n_in: vec![1, 4, 16, 64],
            frequencies: vec![0, 2, 4, 8],
            widths: vec![8, 16, 32],
            width_n_in: vec![1, 4, 16],
            n_attn: 16,
            n_mlp: 16,
            layers: 2,
            n_out: 1,
            base_n_x: 5,
            export_modes: 3,
            mode_n_attn: 64,
            mode_n_mlp: 128,
            mode_layers: 3,
            max_mode_ratio: 0.05,
            min_mode_constancy: 0.9,
            rank_tol: 1e-8,
        }
    }

    fn paper() -> Self {
        Self {
            n_t: 50,
            n_in: vec![1, 4, 16, 64, 100],
            widths: vec![16, 32, 64, 128],
            n_attn: 64,
            n_mlp: 64,
            ..Self::desk()
        }
    }
}

impl Default for TransformerRankConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtfpConfig {
    pub n_h: usize,
    pub point_scale: f64,
    pub points: Vec<usize>,
    pub gains: Vec<f64>,
    pub starts: usize,
    pub start_sd: f64,
    pub steps: usize,
    /// Endpoints average the last `window` states.
    pub window: usize,
    pub sample_stride: usize,
    /// Single-linkage distance; defaults to the point scale when absent.
    pub cluster_distance: Option<f64>,
    pub max_residual: f64,
    pub origin_tol: f64,
}

impl NtfpConfig {
    fn desk() -> Self {
        Self {
            n_h: 128,
            point_scale: 8.0,
            points: vec![0, 1, 2],
            gains: vec![1.0, 1.5, 2.0],
            starts: 50,
            start_sd: 1.0,
            steps: 3000,
            window: 2000,
            sample_stride: 50,
            cluster_distance: None,
            max_residual: 1e-10,
            origin_tol: 1e-6,
        }
    }
}

impl Default for NtfpConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct Config {
    pub seed: u64,
    pub scale: Scale,
    pub verify: VerifyConfig,
    pub core_alignment: CoreAlignmentConfig,
    pub selfref: SelfrefConfig,
    pub rank_regimes: RankRegimesConfig,
    pub transformer_rank: TransformerRankConfig,
    pub ntfp: NtfpConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::for_scale(Scale::Desk)
    }
}

impl Config {
    pub fn for_scale(scale: Scale) -> Self {
        let paper = scale == Scale::Paper;
        Self {
            seed: 0,
            scale,
            verify: VerifyConfig::default(),
            core_alignment: if paper { CoreAlignmentConfig::paper() } else { CoreAlignmentConfig::desk() },
            selfref: if paper { SelfrefConfig::paper() } else { SelfrefConfig::desk() },
            rank_regimes: if paper { RankRegimesConfig::paper() } else { RankRegimesConfig::desk() },
            transformer_rank: if paper { TransformerRankConfig::paper() } else { TransformerRankConfig::desk() },
            ntfp: NtfpConfig::desk(),
        }
    }

    /// Parses a config file; `scale` overrides the file's own `scale` key.
    pub fn parse(text: &str, json: bool, scale: Option<Scale>) -> Result<Self, CliError> {
        // First pass validates keys and types against desk defaults, with
        // line-numbered errors.
        let checked: Config = if json {
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("line {}: {e}", e.line())))?
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(toml_message(text, &e)))?
        };
        let scale = scale.unwrap_or(checked.scale);
        if scale == Scale::Desk {
            return Ok(Config { scale, ..checked });
        }
        let given: serde_json::Value = if json {
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?
        } else {
            let t: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(toml_message(text, &e)))?;
            serde_json::to_value(t).map_err(|e| CliError::Config(e.to_string()))?
        };
        let mut base = serde_json::to_value(Config::for_scale(scale)).expect("config serializes");
        merge(&mut base, given);
        let mut cfg: Config = serde_json::from_value(base).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.scale = scale;
        Ok(cfg)
    }

    pub fn load(path: &Path, scale: Option<Scale>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::parse(&text, json, scale).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let t = &self.core_alignment.task;
        for (name, t) in [("core-alignment", t), ("selfref", &self.selfref.task)] {
            if t.n_h == 0 || t.n_x == 0 || t.phase == 0 || t.train_batch == 0 {
                return bad(format!("{name}.task: sizes must be positive"));
            }
            if t.ntfp_points > t.n_h {
                return bad(format!("{name}.task: {} fixed points in {} dimensions", t.ntfp_points, t.n_h));
            }
        }
        if self.core_alignment.checkpoints == 0 || self.selfref.checkpoints == 0 {
            return bad("checkpoints must be positive".into());
        }
        if self.selfref.learned_modes.iter().any(|&m| m == 0 || m > 3) {
            return bad("selfref.learned_modes must lie in 1..=3".into());
        }
        let r = &self.rank_regimes;
        if let Some(&k) = r.input_ranks.iter().find(|&&k| k == 0 || k > r.n_in) {
            return bad(format!("rank-regimes.input_ranks: {k} outside 1..={}", r.n_in));
        }
        if r.gains.is_empty() || r.input_ranks.is_empty() || r.families.is_empty() {
            return bad("rank-regimes: empty sweep".into());
        }
        let x = &self.transformer_rank;
        if x.layers == 0 || x.mode_layers == 0 || x.n_t == 0 || x.n_in.is_empty() {
            return bad("transformer-rank: layers, n_t and n_in grid must be non-empty".into());
        }
        let sizes = [x.base_n_x, x.n_attn, x.n_mlp, x.n_out, x.mode_n_attn, x.mode_n_mlp];
        if sizes.contains(&0) || x.n_x.contains(&0) || x.n_in.contains(&0) || x.widths.contains(&0) || x.width_n_in.contains(&0) {
            return bad("transformer-rank: sizes must be positive".into());
        }
        let n = &self.ntfp;
        if n.window == 0 || n.window > n.steps || n.sample_stride == 0 {
            return bad(format!("ntfp: window {} and stride {} for {} steps", n.window, n.sample_stride, n.steps));
        }
        if let Some(&m) = n.points.iter().find(|&&m| m > n.n_h) {
            return bad(format!("ntfp: {m} points in {} dimensions", n.n_h));
        }
        Ok(())
    }
}

fn toml_message(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {}", e.message())
        }
        None => e.message().to_string(),
    }
}

fn merge(base: &mut serde_json::Value, given: serde_json::Value) {
    match (base, given) {
        (serde_json::Value::Object(b), serde_json::Value::Object(g)) => {
            for (k, v) in g {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
