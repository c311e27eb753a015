//! Subcommand implementations. Each returns a typed outcome so integration
//! tests can drive commands in-process; `main` only maps them to exit codes.

pub mod analyze;
pub mod finetune;
pub mod prune;
pub mod sweep;
pub mod train;

use crate::config::LoadedConfig;
use crate::errors::{CliError, Result};
use gprune_core::{GravityConfig, ModelGraph};
use std::path::{Path, PathBuf};

/// Output directory: the `--out-dir` flag wins, then the config's `out_dir`,
/// then `./gprune-out`. Created if missing.
pub fn resolve_out_dir(loaded: &LoadedConfig, flag: Option<&Path>) -> Result<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| loaded.config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("gprune-out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Fresh model from the descriptor, or the configured pretrained checkpoint.
pub fn build_or_load_model(loaded: &LoadedConfig, seed: u64) -> Result<ModelGraph> {
    if let Some(pretrained) = &loaded.config.model.pretrained {
        let path = loaded.resolve(pretrained);
        let (model, _meta) = gprune_core::load_checkpoint(&path)?;
        return Ok(model);
    }
    let path = loaded.descriptor_path();
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(gprune_core::build_model(&text, seed)?)
}

/// Gravity config for this run, if the config has a gravity section.
pub fn gravity_for(loaded: &LoadedConfig, model: &ModelGraph) -> Result<Option<GravityConfig>> {
    match &loaded.config.gravity {
        Some(section) => Ok(Some(crate::config::gravity_config(section, model)?)),
        None => Ok(None),
    }
}

/// The prunable-layer set this config denotes: the gravity section's set when
/// present, the model default otherwise.
pub fn prune_set_for(loaded: &LoadedConfig, model: &ModelGraph) -> Result<Vec<usize>> {
    match &loaded.config.gravity {
        Some(section) => crate::config::prune_set(&section.prune_layers, model),
        None => Ok(model.default_prune_set()),
    }
}

pub fn train_options(loaded: &LoadedConfig, gravity: Option<GravityConfig>) -> gprune_core::TrainOptions {
    let t = &loaded.config.train;
    gprune_core::TrainOptions {
        epochs: t.epochs,
        batch_size: t.batch_size,
        lr: gprune_core::LrSchedule {
            base: t.lr,
            milestones: t.lr_milestones.clone(),
            gamma: t.lr_gamma,
        },
        gravity,
        seed: loaded.config.seed,
        bn_momentum: 0.1,
    }
}
