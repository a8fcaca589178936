//! Experiment configuration: a TOML tree with a strict schema (unknown
//! keys are rejected) covering data, surrogate, trigger, poisoning,
//! victim, defenses, and analysis exports.

use std::path::{Path, PathBuf};

use grond_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub surrogate: ModelSection,
    pub trigger: TriggerSection,
    pub poison: PoisonSection,
    pub victim: VictimSection,
    #[serde(default)]
    pub defenses: Vec<DefenseSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: DatasetKind,
    /// CIFAR10 batch directory; falls back to $GROND_DATA_ROOT.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_train_seed")]
    pub train_seed: u64,
    #[serde(default = "default_test_seed")]
    pub test_seed: u64,
    /// Held-out validation images split off the training set.
    #[serde(default = "default_val_size")]
    pub val_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

fn default_classes() -> usize {
    8
}
fn default_per_class() -> usize {
    250
}
fn default_side() -> usize {
    12
}
fn default_test_per_class() -> usize {
    125
}
fn default_train_seed() -> u64 {
    101
}
fn default_test_seed() -> u64 {
    202
}
fn default_val_size() -> usize {
    200
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    /// "1", "1/2", "1/4", "1/8".
    pub channel_scale: String,
    pub train: TrainSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    pub epochs: usize,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_lr_gamma")]
    pub lr_gamma: f32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub augment: bool,
}

fn default_momentum() -> f32 {
    0.9
}
fn default_weight_decay() -> f32 {
    5e-4
}
fn default_lr_gamma() -> f32 {
    0.1
}
fn default_batch_size() -> usize {
    128
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            milestones: self.milestones.clone(),
            lr_gamma: self.lr_gamma,
            batch_size: self.batch_size,
            seed,
            augment: self.augment,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSection {
    pub kind: TriggerKindConfig,
    /// l-inf budget in /255 units (paper convention).
    #[serde(default = "default_epsilon255")]
    pub epsilon: u32,
    /// PGD step size in /255 units.
    #[serde(default = "default_alpha255")]
    pub alpha: u32,
    /// UPGD budget: passes over the training set.
    #[serde(default = "default_upgd_epochs")]
    pub iteration_epochs: usize,
    #[serde(default = "default_trigger_batch")]
    pub batch_size: usize,
    /// Per-sample PGD steps.
    #[serde(default = "default_pgd_steps")]
    pub steps: usize,
    #[serde(default = "default_patch_side")]
    pub patch_side: usize,
    #[serde(default = "default_blend_ratio")]
    pub blend_ratio: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKindConfig {
    Upgd,
    PgdPerSample,
    RandomNoise,
    Patch,
    Blend,
}

fn default_epsilon255() -> u32 {
    8
}
fn default_alpha255() -> u32 {
    2
}
fn default_upgd_epochs() -> usize {
    10
}
fn default_trigger_batch() -> usize {
    128
}
fn default_pgd_steps() -> usize {
    10
}
fn default_patch_side() -> usize {
    3
}
fn default_blend_ratio() -> f32 {
    0.2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonSection {
    pub target_class: u32,
    pub rate: f64,
    pub label_mode: LabelModeConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelModeConfig {
    Clean,
    Dirty,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimSection {
    pub arch: String,
    pub channel_scale: String,
    #[serde(default = "default_abi")]
    pub abi: bool,
    #[serde(default = "default_u")]
    pub u: f32,
    #[serde(default = "default_apply_every")]
    pub apply_every: usize,
    pub train: TrainSection,
}

fn default_abi() -> bool {
    true
}
fn default_u() -> f32 {
    3.0
}
fn default_apply_every() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DefenseSection {
    Clp {
        #[serde(default = "default_u")]
        u: f32,
    },
    Ft {
        #[serde(default = "default_ft_epochs")]
        epochs: usize,
        #[serde(default = "default_ft_lr")]
        lr: f32,
        #[serde(default = "default_ft_fraction")]
        subset_fraction: f64,
    },
    NeuronNoise {
        eps_noise: f32,
    },
    TacPrune {
        #[serde(default)]
        thresholds: Vec<f32>,
        #[serde(default = "default_tac_layer")]
        layer: String,
        #[serde(default = "default_tac_subset")]
        subset: usize,
    },
}

fn default_ft_epochs() -> usize {
    20
}
fn default_ft_lr() -> f32 {
    0.01
}
fn default_ft_fraction() -> f64 {
    0.01
}
fn default_tac_layer() -> String {
    "stage4".into()
}
fn default_tac_subset() -> usize {
    256
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default)]
    pub reports: Vec<ReportKind>,
    #[serde(default = "default_tac_layer")]
    pub tac_layer: String,
    #[serde(default = "default_tac_subset")]
    pub tac_subset: usize,
    #[serde(default = "default_lambda")]
    pub decouple_lambda: f32,
    #[serde(default = "default_decouple_epochs")]
    pub decouple_epochs: usize,
    #[serde(default = "default_decouple_lr")]
    pub decouple_lr: f32,
    #[serde(default = "default_decouple_fraction")]
    pub decouple_fraction: f64,
    #[serde(default = "default_feature_samples")]
    pub feature_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Uclc,
    Tac,
    Features,
    Decouple,
}

fn default_lambda() -> f32 {
    grond_lab::analysis::DECOUPLE_LAMBDA
}
fn default_decouple_epochs() -> usize {
    grond_lab::analysis::DECOUPLE_EPOCHS
}
fn default_decouple_lr() -> f32 {
    grond_lab::analysis::DECOUPLE_LR
}
fn default_decouple_fraction() -> f64 {
    0.01
}
fn default_feature_samples() -> usize {
    512
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| anyhow::anyhow!("config schema error: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(0.0..=1.0).contains(&self.poison.rate) {
            anyhow::bail!("poison.rate {} outside [0,1]", self.poison.rate);
        }
        if self.trigger.epsilon > 255 {
            anyhow::bail!("trigger.epsilon is in /255 units and must be <= 255");
        }
        if self.trigger.alpha == 0 && self.trigger.epsilon > 0 {
            anyhow::bail!("trigger.alpha must be positive when epsilon > 0");
        }
        parse_scale(&self.surrogate.channel_scale)?;
        parse_scale(&self.victim.channel_scale)?;
        Ok(())
    }

    pub fn epsilon(&self) -> f32 {
        self.trigger.epsilon as f32 / 255.0
    }

    pub fn alpha(&self) -> f32 {
        self.trigger.alpha as f32 / 255.0
    }

    /// Hash of the canonical (JSON) serialization: stable under TOML
    /// formatting and comments, and it pins every stochastic output in
    /// deterministic mode.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn parse_scale(s: &str) -> anyhow::Result<f64> {
    match s {
        "1" => Ok(1.0),
        "1/2" => Ok(0.5),
        "1/4" => Ok(0.25),
        "1/8" => Ok(0.125),
        other => anyhow::bail!("channel_scale {other:?} not one of 1, 1/2, 1/4, 1/8"),
    }
}
