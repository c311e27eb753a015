//! `gprune prune`: derive pruned checkpoints at every configured rate from
//! one frozen checkpoint. No training happens here; the optimizer-step
//! counter proves it.

use crate::config::LoadedConfig;
use crate::errors::{CliError, Result};
use crate::{commands, reports};
use gprune_core::{cost, pruning};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug)]
pub struct PrunedModel {
    pub rate: f64,
    pub checkpoint: PathBuf,
    pub plan: PathBuf,
    pub params: u64,
    pub flops: u64,
    pub speedup: f64,
    pub compression: f64,
}

#[derive(Debug)]
pub struct PruneOutcome {
    pub pruned: Vec<PrunedModel>,
    /// Optimizer steps executed while pruning; always zero.
    pub optimizer_steps_delta: u64,
}

pub fn run(
    loaded: &LoadedConfig,
    checkpoint: &Path,
    out_flag: Option<&Path>,
) -> Result<PruneOutcome> {
    let started = Instant::now();
    let out = commands::resolve_out_dir(loaded, out_flag)?;
    let (model, ckpt_meta) = gprune_core::load_checkpoint(checkpoint)?;
    let steps_before = model.opt_steps;

    let set = commands::prune_set_for(loaded, &model)?;
    if set.is_empty() {
        return Err(CliError::Config(
            "model has no prunable conv layers".into(),
        ));
    }
    let base = cost::cost_model(&model)?;

    let mut outcome = PruneOutcome {
        pruned: Vec::new(),
        optimizer_steps_delta: 0,
    };
    let mut rows = Vec::new();
    for &rate in &loaded.config.pruning.rates {
        let plan = pruning::make_pruning_plan(&model, rate, &set)?;
        let plan_path = out.join(format!("plan_p{rate}.toml"));
        pruning::save_plan(&plan, &plan_path)?;

        let pruned = pruning::apply_plan(&model, &plan)?;
        let report = cost::cost_model(&pruned)?;
        let (speedup, compression) = cost::speedup_compression(&base, &report)?;
        reports::write_cost_report(&out.join(format!("cost_p{rate}.csv")), &report)?;

        let ckpt_path = out.join(format!("pruned_p{rate}.gprn"));
        gprune_core::save_checkpoint(&pruned, &ckpt_path, ckpt_meta)?;

        outcome.optimizer_steps_delta += pruned.opt_steps - steps_before;
        rows.push(reports::RatioRow {
            rate,
            params: report.total_params,
            flops: report.total_flops,
            speedup,
            compression,
        });
        println!(
            "p_r {rate}: params {} flops {}  speedup {speedup:.2}x compression {compression:.2}x",
            report.total_params, report.total_flops
        );
        outcome.pruned.push(PrunedModel {
            rate,
            checkpoint: ckpt_path,
            plan: plan_path,
            params: report.total_params,
            flops: report.total_flops,
            speedup,
            compression,
        });
    }
    outcome.optimizer_steps_delta += model.opt_steps - steps_before;
    reports::write_ratios(&out.join("ratios.csv"), &rows)?;

    let mut meta = reports::RunMeta::new("prune", loaded);
    meta.wall_secs = started.elapsed().as_secs_f64();
    meta.insert("checkpoint", checkpoint.display().to_string());
    meta.insert("base_params", base.total_params);
    meta.insert("base_flops", base.total_flops);
    meta.insert("optimizer_steps_during_prune", outcome.optimizer_steps_delta);
    meta.insert(
        "rates",
        serde_json::Value::from(loaded.config.pruning.rates.clone()),
    );
    reports::write_json(&out.join("run_meta.json"), &meta)?;

    Ok(outcome)
}
