//! Configuration file schema.
//!
//! One JSON document drives every subcommand: artifact paths at the top
//! level, per-command parameter sections below. Unknown keys anywhere are
//! rejected up front so typos fail loudly instead of silently falling back
//! to defaults. Relative paths resolve against the config file's directory,
//! so a config and its artifacts can be moved around together.

use std::path::{Path, PathBuf};

use manifuzz_core::coverage::{CoverageConfig, Criterion};
use manifuzz_core::oracle::Agreement;
use manifuzz_core::quant::QuantKind;
use manifuzz_core::traversal::{CampaignMode, FuzzConfig, Strategy};
use serde::Deserialize;

/// Top-level configuration document.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Directory all artifacts land in. Default `artifacts`.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Dataset used for training, profiling, manifolds, and seed corpora.
    pub dataset: Option<DatasetConfig>,
    /// Model manifest path. Written by `train`, read by everything else.
    /// Default `<out_dir>/model/manifest.json`.
    pub model: Option<PathBuf>,
    /// Manifold path. Written by `build-manifold`, read by `fuzz`.
    /// Default `<out_dir>/manifold/manifold.json`.
    pub manifold: Option<PathBuf>,
    /// Activation-profile path. Written by `profile`, read by `fuzz`.
    /// Default `<out_dir>/profile.json`.
    pub profile: Option<PathBuf>,
    pub train: Option<TrainConfig>,
    pub build_manifold: Option<ManifoldConfig>,
    #[serde(default)]
    pub coverage: CoverageConfig,
    /// Fault oracle; defaults to label consistency.
    pub oracle: Option<OracleConfig>,
    pub fuzz: Option<FuzzSection>,
    pub quantize: Option<QuantizeConfig>,
    pub retrain: Option<RetrainConfig>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("artifacts")
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Synthetic Gaussian-blob images, deterministic per seed.
    Blobs {
        classes: usize,
        shape: Vec<usize>,
        per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_fraction")]
        split_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
    /// IDX-format image/label files.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_fraction")]
        split_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
}

fn default_spread() -> f64 {
    0.08
}

fn default_fraction() -> f64 {
    0.8
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Shuffling seed for SGD; overridable with `--seed`.
    #[serde(default)]
    pub seed: u64,
    /// Weight-initialization seed.
    #[serde(default)]
    pub init_seed: u64,
}

fn default_lr() -> f64 {
    0.5
}

fn default_epochs() -> usize {
    30
}

fn default_batch() -> usize {
    16
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifoldConfig {
    /// Requested latent dimension; reduced if a class lacks the rank.
    pub latent_dim: usize,
    pub valid_range: (f32, f32),
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        ManifoldConfig { latent_dim: 8, valid_range: (0.0, 1.0) }
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleConfig {
    /// Decoded inputs must keep their chart's class label.
    LabelConsistency,
    /// The primary model must agree with every listed companion model.
    Differential { models: Vec<PathBuf>, agreement: Agreement },
    /// The primary model must agree with its quantized sibling.
    QuantDiff { quantized: PathBuf },
}

/// Campaign feedback mode as written in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
pub enum CliMode {
    #[default]
    #[serde(rename = "graybox")]
    Graybox,
    #[serde(rename = "blackbox-quant")]
    BlackboxQuant,
}

impl CliMode {
    pub fn campaign_mode(self) -> CampaignMode {
        match self {
            CliMode::Graybox => CampaignMode::Graybox,
            CliMode::BlackboxQuant => CampaignMode::Blackbox,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuzzSection {
    #[serde(default)]
    pub mode: CliMode,
    #[serde(default = "d_objective")]
    pub objective: Criterion,
    #[serde(default = "d_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub budget_steps: Option<u64>,
    #[serde(default)]
    pub budget_seconds: Option<f64>,
    #[serde(default = "d_try_num")]
    pub try_num: u32,
    #[serde(default = "d_batch_size")]
    pub batch_size: u32,
    #[serde(default = "d_step_scale")]
    pub step_scale: f64,
    #[serde(default = "d_ridge")]
    pub ridge: f64,
    #[serde(default = "d_priority_decay")]
    pub priority_decay: f64,
    #[serde(default = "d_p_min")]
    pub p_min: f64,
    #[serde(default = "d_delta")]
    pub delta: f64,
    #[serde(default = "d_lambda_cap")]
    pub lambda_cap: f64,
    /// Overridable with `--seed`.
    #[serde(default)]
    pub rng_seed: u64,
    /// Cap on the seed corpus size (class-balanced truncation).
    #[serde(default)]
    pub corpus_limit: Option<usize>,
}

impl Default for FuzzSection {
    fn default() -> Self {
        FuzzSection {
            mode: CliMode::Graybox,
            objective: d_objective(),
            strategy: d_strategy(),
            budget_steps: None,
            budget_seconds: None,
            try_num: d_try_num(),
            batch_size: d_batch_size(),
            step_scale: d_step_scale(),
            ridge: d_ridge(),
            priority_decay: d_priority_decay(),
            p_min: d_p_min(),
            delta: d_delta(),
            lambda_cap: d_lambda_cap(),
            rng_seed: 0,
            corpus_limit: None,
        }
    }
}

fn d_objective() -> Criterion {
    FuzzConfig::default().objective
}
fn d_strategy() -> Strategy {
    FuzzConfig::default().strategy
}
fn d_try_num() -> u32 {
    FuzzConfig::default().try_num
}
fn d_batch_size() -> u32 {
    FuzzConfig::default().batch_size
}
fn d_step_scale() -> f64 {
    FuzzConfig::default().step_scale
}
fn d_ridge() -> f64 {
    FuzzConfig::default().ridge
}
fn d_priority_decay() -> f64 {
    FuzzConfig::default().priority_decay
}
fn d_p_min() -> f64 {
    FuzzConfig::default().p_min
}
fn d_delta() -> f64 {
    FuzzConfig::default().delta
}
fn d_lambda_cap() -> f64 {
    FuzzConfig::default().lambda_cap
}

impl FuzzSection {
    pub fn to_fuzz_config(&self) -> FuzzConfig {
        FuzzConfig {
            objective: self.objective,
            mode: self.mode.campaign_mode(),
            strategy: self.strategy,
            budget_steps: self.budget_steps,
            budget_seconds: self.budget_seconds,
            try_num: self.try_num,
            batch_size: self.batch_size,
            step_scale: self.step_scale,
            ridge: self.ridge,
            priority_decay: self.priority_decay,
            p_min: self.p_min,
            delta: self.delta,
            lambda_cap: self.lambda_cap,
            rng_seed: self.rng_seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeConfig {
    pub kinds: Vec<QuantKind>,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        QuantizeConfig { kinds: vec![QuantKind::Dense] }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    /// Campaign report to pull faults from. Default
    /// `<out_dir>/fuzz/report.json`.
    pub report: Option<PathBuf>,
    /// Cap on the number of sampled fault inputs.
    pub limit: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Overridable with `--seed`.
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig { report: None, limit: 2000, epochs: 3, lr: 0.1, batch_size: 32, seed: 0 }
    }
}

/// A parsed config plus the directory its relative paths resolve against.
pub struct LoadedConfig {
    pub file: ConfigFile,
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let file: ConfigFile = serde_json::from_str(&text)
            .map_err(|e| format!("malformed config {}: {e}", path.display()))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        Ok(LoadedConfig { file, base })
    }

    /// Resolves a config-relative path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// The output directory, honoring a `--out` override.
    pub fn out_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        match cli_out {
            Some(p) => self.resolve(p),
            None => self.resolve(&self.file.out_dir),
        }
    }

    /// Model manifest path (default `<out_dir>/model/manifest.json`).
    pub fn model_path(&self, cli_out: Option<&Path>) -> PathBuf {
        match &self.file.model {
            Some(p) => self.resolve(p),
            None => self.out_dir(cli_out).join("model").join("manifest.json"),
        }
    }

    /// Manifold path (default `<out_dir>/manifold/manifold.json`).
    pub fn manifold_path(&self, cli_out: Option<&Path>) -> PathBuf {
        match &self.file.manifold {
            Some(p) => self.resolve(p),
            None => self.out_dir(cli_out).join("manifold").join("manifold.json"),
        }
    }

    /// Profile path (default `<out_dir>/profile.json`).
    pub fn profile_path(&self, cli_out: Option<&Path>) -> PathBuf {
        match &self.file.profile {
            Some(p) => self.resolve(p),
            None => self.out_dir(cli_out).join("profile.json"),
        }
    }
}
