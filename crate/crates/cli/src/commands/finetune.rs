//! `gprune finetune`: plain SGD recovery training of a pruned checkpoint.
//! Gravity is always off here, whatever the config's training section says.

use crate::config::LoadedConfig;
use crate::errors::{CliError, Result};
use crate::{commands, dataset, reports};
use gprune_core::checkpoint::TrainMeta;
use gprune_core::train::{LrSchedule, TrainOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: PathBuf,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

pub fn run(
    loaded: &LoadedConfig,
    checkpoint: &Path,
    out_flag: Option<&Path>,
) -> Result<FinetuneOutcome> {
    let started = Instant::now();
    let out = commands::resolve_out_dir(loaded, out_flag)?;
    let Some(ft) = &loaded.config.finetune else {
        return Err(CliError::Config("config has no [finetune] section".into()));
    };
    let (mut model, ckpt_meta) = gprune_core::load_checkpoint(checkpoint)?;
    let (train_ds, test_ds) = dataset::load(loaded, loaded.config.seed)?;
    let batch = loaded.config.train.batch_size;

    let (_, accuracy_before) = gprune_core::evaluate(&model, &test_ds, batch)?;

    let mut logs = Vec::new();
    if ft.epochs > 0 {
        let opts = TrainOptions {
            epochs: ft.epochs,
            batch_size: batch,
            lr: LrSchedule::constant(ft.lr),
            gravity: None,
            seed: loaded.config.seed,
            bn_momentum: 0.1,
        };
        logs = gprune_core::train(&mut model, &train_ds, &opts)?;
        reports::write_train_log(&out.join("finetune_log.csv"), &model, &logs)?;
    }
    let (_, accuracy_after) = gprune_core::evaluate(&model, &test_ds, batch)?;

    let path = out.join("finetuned.gprn");
    gprune_core::save_checkpoint(
        &model,
        &path,
        TrainMeta {
            epoch: ckpt_meta.epoch + ft.epochs as u32,
            seed: loaded.config.seed,
            config_hash: loaded.hash64,
        },
    )?;

    let mut meta = reports::RunMeta::new("finetune", loaded);
    meta.wall_secs = started.elapsed().as_secs_f64();
    meta.insert("checkpoint", checkpoint.display().to_string());
    meta.insert("epochs", ft.epochs as u64);
    meta.insert("accuracy_before", accuracy_before);
    meta.insert("accuracy_after", accuracy_after);
    reports::write_json(&out.join("run_meta.json"), &meta)?;

    println!(
        "finetune: top-1 {accuracy_before:.2}% -> {accuracy_after:.2}% over {} epochs",
        ft.epochs
    );
    let _ = logs;

    Ok(FinetuneOutcome {
        checkpoint: path,
        accuracy_before,
        accuracy_after,
    })
}
