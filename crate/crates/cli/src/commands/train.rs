//! `gprune train`: gravity-regularized (or plain) training to a checkpoint.

use crate::config::LoadedConfig;
use crate::errors::Result;
use crate::{commands, dataset, reports};
use gprune_core::checkpoint::TrainMeta;
use gprune_core::train::EpochLog;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub logs: Vec<EpochLog>,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub optimizer_steps: u64,
}

pub fn run(loaded: &LoadedConfig, out_flag: Option<&Path>) -> Result<TrainOutcome> {
    let started = Instant::now();
    let out = commands::resolve_out_dir(loaded, out_flag)?;
    let seed = loaded.config.seed;

    let (train_ds, test_ds) = dataset::load(loaded, seed)?;
    let mut model = commands::build_or_load_model(loaded, seed)?;
    let gravity = commands::gravity_for(loaded, &model)?;
    let opts = commands::train_options(loaded, gravity.clone());

    let logs = gprune_core::train(&mut model, &train_ds, &opts)?;

    reports::write_train_log(&out.join("train_log.csv"), &model, &logs)?;
    if gravity.is_some() {
        reports::write_gravity_log(&out.join("gravity_log.csv"), &model, &logs)?;
    }

    let (test_loss, test_accuracy) =
        gprune_core::evaluate(&model, &test_ds, loaded.config.train.batch_size)?;

    let checkpoint = out.join("checkpoint.gprn");
    gprune_core::save_checkpoint(
        &model,
        &checkpoint,
        TrainMeta {
            epoch: loaded.config.train.epochs as u32,
            seed,
            config_hash: loaded.hash64,
        },
    )?;

    let mut meta = reports::RunMeta::new("train", loaded);
    if let Some(cfg) = &gravity {
        meta = meta.with_gravity(cfg, &model);
    }
    meta.wall_secs = started.elapsed().as_secs_f64();
    meta.insert("epochs", loaded.config.train.epochs as u64);
    meta.insert("optimizer_steps", model.opt_steps);
    meta.insert("final_train_loss", logs.last().map(|l| l.loss).unwrap_or(f64::NAN));
    meta.insert(
        "final_train_acc",
        logs.last().map(|l| l.accuracy).unwrap_or(f64::NAN),
    );
    meta.insert("test_loss", test_loss);
    meta.insert("test_acc", test_accuracy);
    reports::write_json(&out.join("run_meta.json"), &meta)?;

    for log in &logs {
        println!(
            "epoch {:>3}  loss {:.4}  acc {:>6.2}%  lr {:<8}  {:.1}s",
            log.epoch, log.loss, log.accuracy, log.lr, log.wall_secs
        );
    }
    println!(
        "test: loss {test_loss:.4}, top-1 {test_accuracy:.2}%  ->  {}",
        checkpoint.display()
    );

    Ok(TrainOutcome {
        checkpoint,
        logs,
        test_loss,
        test_accuracy,
        optimizer_steps: model.opt_steps,
    })
}
