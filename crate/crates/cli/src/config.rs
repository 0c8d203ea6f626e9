//! Run configuration.
//!
//! One TOML file per run. Top-level keys `seed` and `out` are global;
//! command sections (`gen`, `train`, `eval`, `analyze`, `sweep`) and the
//! shared hyperparameter sections (`model`, `softmax`, `optim`) are
//! optional and only read by the commands that need them. Unknown keys
//! are rejected everywhere.
//!
//! Precedence, highest first: command-line flags (`--seed`, `--out`,
//! `--debug-zero-eps`), then the config file, then built-in defaults.
//! The fully resolved config is written to `<out>/resolved.toml` before a
//! command does any work.

use std::path::PathBuf;

use dul_core::checkpoint::RunMode;
use dul_core::losses::{SoftmaxConfig, SoftmaxVariant};
use dul_core::metrics::Metric;
use dul_core::synth::{CorruptionSpec, GeneratorSpec, IdentitySpec};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

pub const DEFAULT_PAIR_CAP: usize = 200_000;
pub const DEFAULT_TARGETS: [f64; 4] = [1e-5, 1e-4, 1e-3, 1e-2];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub softmax: SoftmaxSection,
    #[serde(default)]
    pub optim: OptimSection,
    pub gen: Option<GenSection>,
    pub train: Option<TrainSection>,
    pub eval: Option<EvalSection>,
    pub analyze: Option<AnalyzeSection>,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Binary,
    Csv,
}

/// Identity data. `seed` falls back to the global seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitySection {
    pub num_classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    #[serde(default = "default_spread")]
    pub center_spread: f64,
    pub base_noise: f64,
    pub seed: Option<u64>,
    #[serde(default)]
    pub sample_stream: u64,
}

fn default_spread() -> f64 {
    30.0
}

/// Corruption pass; the k-th pass defaults to seed `global + 100 + k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSection {
    pub fraction: f64,
    pub scale: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    #[serde(default = "default_format")]
    pub format: DataFormat,
    pub identities: IdentitySection,
    #[serde(default)]
    pub corruptions: Vec<CorruptionSection>,
}

fn default_format() -> DataFormat {
    DataFormat::Binary
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub trunk_layers: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_sigma_bias")]
    pub sigma_bias_init: f64,
    pub mu_norm: Option<f64>,
}

fn default_hidden() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_embed() -> usize {
    16
}
fn default_sigma_bias() -> f64 {
    -2.0
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            trunk_layers: default_layers(),
            embed_dim: default_embed(),
            sigma_bias_init: default_sigma_bias(),
            mu_norm: None,
        }
    }
}

/// Margin and scale default per variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftmaxSection {
    #[serde(default = "default_variant")]
    pub variant: SoftmaxVariant,
    pub margin: Option<f64>,
    pub scale: Option<f64>,
    #[serde(default)]
    pub normalize_features: bool,
}

fn default_variant() -> SoftmaxVariant {
    SoftmaxVariant::AmSoftmax
}

impl Default for SoftmaxSection {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            margin: None,
            scale: None,
            normalize_features: false,
        }
    }
}

impl SoftmaxSection {
    fn resolve(&mut self) {
        let d = SoftmaxConfig::default_for(self.variant);
        self.margin.get_or_insert(d.margin);
        self.scale.get_or_insert(d.scale);
    }

    pub fn config(&self) -> SoftmaxConfig {
        let d = SoftmaxConfig::default_for(self.variant);
        SoftmaxConfig {
            variant: self.variant,
            margin: self.margin.unwrap_or(d.margin),
            scale: self.scale.unwrap_or(d.scale),
            normalize_features: self.normalize_features,
        }
    }
}

/// SGD settings. `max_lr` defaults to 0.1 for classification and 0.01 for
/// the regression stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub base_lr: f64,
    pub max_lr: Option<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub zero_eps: bool,
}

fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    64
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    1e-4
}
fn default_lambda() -> f64 {
    0.01
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            batch_size: default_batch(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            base_lr: 0.0,
            max_lr: None,
            lambda: default_lambda(),
            zero_eps: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: RunMode,
    /// Directory written by `dul gen`.
    pub dataset: PathBuf,
    /// Baseline checkpoint; required for `dul-rgs`.
    pub baseline: Option<PathBuf>,
    #[serde(default = "default_targets")]
    pub targets: Vec<f64>,
    #[serde(default = "default_pair_cap")]
    pub pair_cap: usize,
}

fn default_targets() -> Vec<f64> {
    DEFAULT_TARGETS.to_vec()
}
fn default_pair_cap() -> usize {
    DEFAULT_PAIR_CAP
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default = "default_targets")]
    pub targets: Vec<f64>,
    #[serde(default = "default_pair_cap")]
    pub pair_cap: usize,
}

fn default_metric() -> Metric {
    Metric::Cosine
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub dataset: PathBuf,
    /// Reference model (deterministic embeddings, class centers).
    pub baseline: PathBuf,
    /// Uncertainty model; its sigma defines the tertiles.
    pub dul: PathBuf,
    #[serde(default = "default_ladder")]
    pub probe_ladder: Vec<f64>,
    #[serde(default = "default_probe_pairs")]
    pub probe_pairs: usize,
}

fn default_ladder() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0, 4.0]
}
fn default_probe_pairs() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    /// Grid over the KL weight.
    Lambda,
    /// Grid over the corrupted fraction of the training set.
    Noise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub kind: SweepKind,
    pub mode: RunMode,
    pub values: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    pub identities: IdentitySection,
    /// Corrupted fraction for lambda sweeps.
    #[serde(default)]
    pub fraction: f64,
    #[serde(default = "default_corruption_scale")]
    pub corruption_scale: f64,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_sweep_targets")]
    pub targets: Vec<f64>,
    #[serde(default = "default_pair_cap")]
    pub pair_cap: usize,
    /// Step count of the regression stage for `dul-rgs`.
    pub rgs_steps: Option<usize>,
    pub rgs_max_lr: Option<f64>,
}

fn default_seeds() -> u64 {
    1
}
fn default_corruption_scale() -> f64 {
    2.0
}
fn default_test_per_class() -> usize {
    20
}
fn default_sweep_targets() -> Vec<f64> {
    vec![1e-3, 1e-2]
}

impl IdentitySection {
    pub fn spec(&self, global_seed: u64) -> IdentitySpec {
        IdentitySpec {
            num_classes: self.num_classes,
            per_class: self.per_class,
            input_dim: self.input_dim,
            center_spread: self.center_spread,
            base_noise: self.base_noise,
            seed: self.seed.unwrap_or(global_seed),
            sample_stream: self.sample_stream,
        }
    }
}

impl GenSection {
    pub fn spec(&self, global_seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            identities: self.identities.spec(global_seed),
            corruptions: self
                .corruptions
                .iter()
                .enumerate()
                .map(|(k, c)| CorruptionSpec {
                    fraction: c.fraction,
                    scale: c.scale,
                    seed: c.seed.unwrap_or(corruption_seed(global_seed, k)),
                })
                .collect(),
        }
    }
}

pub fn corruption_seed(global_seed: u64, k: usize) -> u64 {
    global_seed.wrapping_add(100 + k as u64)
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub zero_eps: bool,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| Failure::Config(e.to_string()))
    }

    /// Applies flag overrides and fills every defaulted value, so the
    /// serialized result fully determines the run.
    pub fn resolve(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if o.zero_eps {
            self.optim.zero_eps = true;
        }
        self.softmax.resolve();
        let seed = self.seed;
        if let Some(g) = &mut self.gen {
            g.identities.seed.get_or_insert(seed);
            for (k, c) in g.corruptions.iter_mut().enumerate() {
                c.seed.get_or_insert(corruption_seed(seed, k));
            }
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
