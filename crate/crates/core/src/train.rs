//! The training loop: plain SGD, optionally under the gravity regularizer.
//!
//! Every step recomputes masses, attractor, distances and forces on the
//! prunable layers (unless the attractor is frozen per epoch), adds the
//! penalty gradient to the data gradient and takes a single SGD step.
//! Shuffling draws from a generator seeded by (seed, epoch), so a fixed seed
//! makes the whole run bit-reproducible.

use crate::backward::{self, GradMap};
use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::forward;
use crate::graph::{LayerId, LayerParams, ModelGraph};
use crate::gravity::{self, GravityConfig, LayerGravityState};
use crate::optim;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Step-decay learning-rate schedule: `base * gamma^(milestones passed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f32,
    pub milestones: Vec<usize>,
    pub gamma: f32,
}

impl LrSchedule {
    pub fn constant(base: f32) -> Self {
        LrSchedule {
            base,
            milestones: Vec::new(),
            gamma: 1.0,
        }
    }

    pub fn at(&self, epoch: usize) -> f32 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(drops as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    /// `None` trains the plain objective; `Some` adds the force penalty.
    pub gravity: Option<GravityConfig>,
    /// Seed of the shuffle stream (parameter init has its own seed).
    pub seed: u64,
    pub bn_momentum: f32,
}

impl TrainOptions {
    pub fn new(epochs: usize, batch_size: usize, lr: f32) -> Self {
        TrainOptions {
            epochs,
            batch_size,
            lr: LrSchedule::constant(lr),
            gravity: None,
            seed: 0,
            bn_momentum: 0.1,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Training top-1 accuracy in percent.
    pub accuracy: f64,
    pub lr: f32,
    pub wall_secs: f64,
    /// Post-epoch gravity snapshot of every prunable layer.
    pub states: Vec<(LayerId, LayerGravityState)>,
}

/// Train in place; returns the per-epoch log. Aborts with a divergence error
/// as soon as the loss stops being finite.
pub fn train(model: &mut ModelGraph, data: &Dataset, opts: &TrainOptions) -> Result<Vec<EpochLog>> {
    if opts.epochs == 0 {
        return Err(CoreError::InvalidTraining("epochs must be >= 1".into()));
    }
    if opts.batch_size == 0 {
        return Err(CoreError::InvalidTraining("batch size must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(CoreError::InvalidTraining("dataset is empty".into()));
    }
    if data.sample_shape() != model.input_shape {
        return Err(CoreError::InvalidTraining(format!(
            "dataset samples {:?} do not match model input {:?}",
            data.sample_shape(),
            model.input_shape
        )));
    }
    if let Some(cfg) = &opts.gravity {
        cfg.validate(model)?;
    }

    let mut logs = Vec::with_capacity(opts.epochs);
    let mut indices: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..opts.epochs {
        let started = Instant::now();
        let lr = opts.lr.at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        indices.shuffle(&mut rng);

        // Freeze the attractor for the epoch when configured to.
        let fixed_attractors: Option<Vec<(LayerId, usize)>> = match &opts.gravity {
            Some(cfg) if !cfg.recompute_attractor => {
                let mut fixed = Vec::new();
                for &id in &cfg.prune_layers {
                    let weight = model.conv_weight(id).expect("validated prune set");
                    let masses = gravity::layer_masses(weight);
                    fixed.push((id, gravity::select_attractor(&masses, cfg.attractor_mode)?));
                }
                Some(fixed)
            }
            _ => None,
        };

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (step, chunk) in indices.chunks(opts.batch_size).enumerate() {
            // Partial trailing batches are dropped: batch statistics of a
            // one-sample batch are degenerate.
            if chunk.len() < opts.batch_size && chunk.len() < 2 {
                continue;
            }
            let (batch, labels) = data.gather(chunk);
            let pass = backward::backward(model, &batch, &labels)
                .map_err(|e| diverged(e, epoch, step))?;
            if !pass.loss.is_finite() {
                return Err(CoreError::Diverged { epoch, step });
            }
            let mut grads = pass.grads;
            if let Some(cfg) = &opts.gravity {
                if cfg.alpha_g > 0.0 {
                    gravity::add_penalty_gradients(
                        model,
                        &mut grads,
                        cfg,
                        fixed_attractors.as_deref(),
                    )?;
                }
            }
            update_running_stats(model, &pass.bn_stats, opts.bn_momentum);
            optim::sgd_step(model, &grads, lr)?;
            loss_sum += pass.loss as f64 * chunk.len() as f64;
            correct += backward::count_correct(&pass.logits, &labels);
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(CoreError::InvalidTraining(
                "batch size leaves no full training batch".into(),
            ));
        }

        let states = match &opts.gravity {
            Some(cfg) => snapshot_states(model, cfg)?,
            None => Vec::new(),
        };
        logs.push(EpochLog {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: 100.0 * correct as f64 / seen as f64,
            lr,
            wall_secs: started.elapsed().as_secs_f64(),
            states,
        });
    }
    Ok(logs)
}

fn diverged(e: CoreError, epoch: usize, step: usize) -> CoreError {
    match e {
        CoreError::NonFinite { .. } => CoreError::Diverged { epoch, step },
        other => other,
    }
}

/// Gravity state of every prunable layer at the current weights.
pub fn snapshot_states(
    model: &ModelGraph,
    cfg: &GravityConfig,
) -> Result<Vec<(LayerId, LayerGravityState)>> {
    let mut states = Vec::with_capacity(cfg.prune_layers.len());
    for &id in &cfg.prune_layers {
        states.push((id, gravity::layer_penalty(model, id, cfg)?));
    }
    Ok(states)
}

fn update_running_stats(
    model: &mut ModelGraph,
    bn_stats: &[Option<forward::BnStats>],
    momentum: f32,
) {
    for (id, stats) in bn_stats.iter().enumerate() {
        let Some(stats) = stats else { continue };
        let Some(LayerParams::Bn {
            running_mean,
            running_var,
            ..
        }) = model.params_mut(id)
        else {
            continue;
        };
        // running variance keeps the unbiased estimate
        let count = stats.count as f32;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * (b * unbias);
        }
    }
}

/// Mean loss and top-1 accuracy (percent) on `data`, inference mode.
pub fn evaluate(model: &ModelGraph, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(CoreError::InvalidTraining("dataset is empty".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = data.gather(chunk);
        let logits = forward::forward(model, &batch)?;
        let (loss, _) = backward::softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        correct += backward::count_correct(&logits, &labels);
    }
    Ok((
        loss_sum / data.len() as f64,
        100.0 * correct as f64 / data.len() as f64,
    ))
}

/// Zero-filled gradient map, for driving `sgd_step` externally.
pub fn zero_grads(model: &ModelGraph) -> GradMap {
    GradMap::zeros_like(model)
}
