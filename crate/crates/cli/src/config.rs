//! Run configuration: a TOML file with a closed schema.
//!
//! Unknown keys anywhere are rejected so a typo like `alpha-g` instead of
//! `alpha_g` fails loudly instead of silently training a baseline. Relative
//! paths are resolved against the config file's directory.

use crate::errors::{CliError, Result};
use gprune_core::gravity::DEFAULT_G;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Default output directory; `--out-dir` overrides it.
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub gravity: Option<GravitySection>,
    #[serde(default)]
    pub pruning: PruningSection,
    #[serde(default)]
    pub finetune: Option<FinetuneSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory with the CIFAR binary batches (cifar kinds only).
    pub path: Option<PathBuf>,
    /// Duplicate the training split with mirrored copies (cifar kinds only).
    #[serde(default)]
    pub hflip: bool,
    // synthetic generator parameters
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

fn default_classes() -> usize {
    4
}
fn default_train_samples() -> usize {
    3000
}
fn default_test_samples() -> usize {
    600
}
fn default_image_size() -> usize {
    16
}
fn default_channels() -> usize {
    3
}
fn default_noise() -> f64 {
    0.6
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub descriptor: PathBuf,
    /// Checkpoint to start from instead of fresh initialization.
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub lr_gamma: f32,
}

fn default_gamma() -> f32 {
    0.1
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GravitySection {
    #[serde(default = "default_g")]
    pub g: f64,
    pub alpha_g: f64,
    #[serde(default)]
    pub attractor_mode: AttractorModeConfig,
    #[serde(default)]
    pub prune_layers: PruneLayersConfig,
    #[serde(default = "default_true")]
    pub recompute_attractor: bool,
}

fn default_g() -> f64 {
    DEFAULT_G
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
pub enum AttractorModeConfig {
    #[default]
    #[serde(rename = "max-mass")]
    MaxMass,
    #[serde(rename = "index-zero")]
    IndexZero,
}

impl From<AttractorModeConfig> for gprune_core::AttractorMode {
    fn from(m: AttractorModeConfig) -> Self {
        match m {
            AttractorModeConfig::MaxMass => gprune_core::AttractorMode::MaxMass,
            AttractorModeConfig::IndexZero => gprune_core::AttractorMode::IndexZero,
        }
    }
}

/// Either the literal string `"all-conv"` or an explicit layer-name list.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum PruneLayersConfig {
    Mode(String),
    Names(Vec<String>),
}

impl Default for PruneLayersConfig {
    fn default() -> Self {
        PruneLayersConfig::Mode("all-conv".into())
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSection {
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
}

impl Default for PruningSection {
    fn default() -> Self {
        PruningSection {
            rates: default_rates(),
        }
    }
}

fn default_rates() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5]
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f32,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub alpha_g: Vec<f64>,
    pub rates: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

/// Loaded config plus provenance (location and content hash).
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub path: PathBuf,
    /// SHA-256 of the raw config bytes, hex.
    pub sha256: String,
    /// First eight bytes of the hash, for checkpoint metadata.
    pub hash64: u64,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn descriptor_path(&self) -> PathBuf {
        self.resolve(&self.config.model.descriptor)
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha_g: Option<f64>,
    pub prune_rate: Option<f64>,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<LoadedConfig> {
    let raw = std::fs::read(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config: RunConfig = toml::from_str(
        std::str::from_utf8(&raw)
            .map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?,
    )
    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;

    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(alpha) = overrides.alpha_g {
        match config.gravity.as_mut() {
            Some(g) => g.alpha_g = alpha,
            None => {
                config.gravity = Some(GravitySection {
                    g: DEFAULT_G,
                    alpha_g: alpha,
                    attractor_mode: AttractorModeConfig::default(),
                    prune_layers: PruneLayersConfig::default(),
                    recompute_attractor: true,
                })
            }
        }
    }
    if let Some(rate) = overrides.prune_rate {
        config.pruning.rates = vec![rate];
    }

    let mut hasher = Sha256::new();
    hasher.update(&raw);
    // overrides change the effective run, so they join the hash
    hasher.update(format!("{overrides:?}").as_bytes());
    let digest = hasher.finalize();
    let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
    let hash64 = u64::from_le_bytes(digest[..8].try_into().expect("sha256 is long enough"));

    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let loaded = LoadedConfig {
        config,
        dir,
        path: path.to_path_buf(),
        sha256,
        hash64,
    };
    validate(&loaded)?;
    Ok(loaded)
}

fn validate(loaded: &LoadedConfig) -> Result<()> {
    let cfg = &loaded.config;
    let err = |msg: String| Err(CliError::Config(msg));

    let descriptor = loaded.descriptor_path();
    if !descriptor.is_file() {
        return err(format!("descriptor not found: {}", descriptor.display()));
    }
    if let Some(p) = &cfg.model.pretrained {
        let p = loaded.resolve(p);
        if !p.is_file() {
            return err(format!("pretrained checkpoint not found: {}", p.display()));
        }
    }
    match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            if cfg.dataset.classes < 2 {
                return err("synthetic dataset needs at least 2 classes".into());
            }
            if cfg.dataset.train_samples == 0 || cfg.dataset.test_samples == 0 {
                return err("synthetic dataset needs nonzero sample counts".into());
            }
        }
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let Some(p) = &cfg.dataset.path else {
                return err("cifar dataset needs a path".into());
            };
            let p = loaded.resolve(p);
            if !p.is_dir() {
                return err(format!("dataset directory not found: {}", p.display()));
            }
        }
    }
    if cfg.train.epochs == 0 {
        return err("train.epochs must be >= 1".into());
    }
    if cfg.train.batch_size == 0 {
        return err("train.batch_size must be >= 1".into());
    }
    if cfg.train.lr <= 0.0 || cfg.train.lr.is_nan() {
        return err("train.lr must be positive".into());
    }
    if let Some(g) = &cfg.gravity {
        if g.alpha_g < 0.0 || !g.alpha_g.is_finite() {
            return err(format!("gravity.alpha_g must be >= 0, got {}", g.alpha_g));
        }
        if g.g <= 0.0 || g.g.is_nan() {
            return err(format!("gravity.g must be > 0, got {}", g.g));
        }
        if let PruneLayersConfig::Mode(m) = &g.prune_layers {
            if m != "all-conv" {
                return err(format!(
                    "gravity.prune_layers must be \"all-conv\" or a layer list, got \"{m}\""
                ));
            }
        }
    }
    for &r in &cfg.pruning.rates {
        if !(0.0..1.0).contains(&r) {
            return err(format!("pruning rate {r} outside [0, 1)"));
        }
    }
    if let Some(ft) = &cfg.finetune {
        if ft.lr <= 0.0 || ft.lr.is_nan() {
            return err("finetune.lr must be positive".into());
        }
    }
    if let Some(sweep) = &cfg.sweep {
        if sweep.alpha_g.is_empty() {
            return err("sweep.alpha_g must list at least one gravity rate".into());
        }
        for &a in &sweep.alpha_g {
            if a < 0.0 || !a.is_finite() {
                return err(format!("sweep gravity rate {a} must be >= 0"));
            }
        }
        for &r in &sweep.rates {
            if !(0.0..1.0).contains(&r) {
                return err(format!("sweep rate {r} outside [0, 1)"));
            }
        }
        if !sweep.rates.contains(&0.0) {
            return err("sweep.rates must include 0 (the unpruned point)".into());
        }
    }
    Ok(())
}

/// Resolve the gravity section against a model: `"all-conv"` means the
/// model's default prunable set; explicit names are validated.
pub fn gravity_config(
    section: &GravitySection,
    model: &gprune_core::ModelGraph,
) -> Result<gprune_core::GravityConfig> {
    let prune_layers = prune_set(&section.prune_layers, model)?;
    Ok(gprune_core::GravityConfig {
        g: section.g,
        alpha_g: section.alpha_g,
        attractor_mode: section.attractor_mode.into(),
        prune_layers,
        recompute_attractor: section.recompute_attractor,
    })
}

/// The prunable-layer set a config section denotes for `model`.
pub fn prune_set(
    layers: &PruneLayersConfig,
    model: &gprune_core::ModelGraph,
) -> Result<Vec<gprune_core::LayerId>> {
    match layers {
        PruneLayersConfig::Mode(_) => Ok(model.default_prune_set()),
        PruneLayersConfig::Names(names) => {
            let prunable = model.structurally_prunable();
            let mut ids = Vec::with_capacity(names.len());
            for name in names {
                let id = model.layer_id(name).ok_or_else(|| {
                    CliError::Config(format!("prune layer '{name}' not in the model"))
                })?;
                if !prunable.contains(&id) {
                    return Err(CliError::Config(format!(
                        "layer '{name}' cannot be pruned locally (tied to an add-join or not a conv)"
                    )));
                }
                ids.push(id);
            }
            Ok(ids)
        }
    }
}
