//! Gravity regularization of convolutional filters.
//!
//! Each filter in a prunable conv layer gets a mass (the L1 norm of its
//! weights). One filter per layer is the attractor; every other filter feels
//! a force proportional to the product of its mass with the attractor's and
//! to the squared index distance between them, so far-away filters are pushed
//! toward zero while near neighbours keep their weights. The penalty enters
//! training as an extra sign-gradient term on top of the data loss.
//!
//! Scalar force arithmetic runs in f64: the gravitational constant keeps the
//! raw forces around 1e-9, where accumulating in f32 would lose most of the
//! signal before the gravity rate scales it back up.

use crate::backward::{self, GradMap, LayerGrads};
use crate::error::{CoreError, Result};
use crate::graph::{LayerId, LayerKind, ModelGraph};
use crate::optim;
use crate::tensor::TensorRec;

/// Newton's constant; the default scale of every force term.
pub const DEFAULT_G: f64 = 6.7e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttractorMode {
    /// Largest-mass filter attracts; ties resolve to the lowest index.
    MaxMass,
    /// The filter at index zero attracts.
    IndexZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GravityConfig {
    /// Gravitational constant.
    pub g: f64,
    /// Gravity rate: weight of the force penalty in the objective.
    pub alpha_g: f64,
    pub attractor_mode: AttractorMode,
    /// Conv layers the force applies to (the prunable set).
    pub prune_layers: Vec<LayerId>,
    /// Re-pick the attractor every optimizer step; when false it is chosen
    /// once per epoch.
    pub recompute_attractor: bool,
}

impl GravityConfig {
    pub fn new(alpha_g: f64, prune_layers: Vec<LayerId>) -> Self {
        GravityConfig {
            g: DEFAULT_G,
            alpha_g,
            attractor_mode: AttractorMode::MaxMass,
            prune_layers,
            recompute_attractor: true,
        }
    }

    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        if self.alpha_g < 0.0 || !self.alpha_g.is_finite() {
            return Err(CoreError::InvalidTraining(format!(
                "gravity rate must be >= 0, got {}",
                self.alpha_g
            )));
        }
        if self.g <= 0.0 || !self.g.is_finite() {
            return Err(CoreError::InvalidTraining(format!(
                "gravitational constant must be > 0, got {}",
                self.g
            )));
        }
        for &id in &self.prune_layers {
            let ok = id < model.layers().len()
                && matches!(model.layer(id).kind, LayerKind::Conv2d { .. });
            if !ok {
                return Err(CoreError::NotPrunable {
                    layer: match id < model.layers().len() {
                        true => model.layer(id).name.clone(),
                        false => format!("#{id}"),
                    },
                });
            }
        }
        Ok(())
    }
}

/// Per-filter gravity quantities of one layer at one instant.
#[derive(Debug, Clone)]
pub struct LayerGravityState {
    /// L1 norm of each filter's weights.
    pub masses: Vec<f64>,
    pub attractor_index: usize,
    /// Inverted distances `1 / |p1 - pn|`; zero sentinel at the attractor,
    /// which feels no force from itself.
    pub distances: Vec<f64>,
    pub forces: Vec<f64>,
    pub total_force: f64,
}

/// Mass of one filter: the L1 norm of its weight entries.
pub fn filter_mass(filter_weights: &[f32]) -> f64 {
    filter_weights.iter().map(|w| w.abs() as f64).sum()
}

/// Masses of every filter in a `[N, C, K, K]` weight tensor.
pub fn layer_masses(weight: &TensorRec) -> Vec<f64> {
    (0..weight.dim(0)).map(|n| filter_mass(weight.slab(n))).collect()
}

/// Attracting filter index for the given masses.
pub fn select_attractor(masses: &[f64], mode: AttractorMode) -> Result<usize> {
    if masses.is_empty() {
        return Err(CoreError::EmptyLayer {
            layer: "<attractor selection>".into(),
        });
    }
    Ok(match mode {
        AttractorMode::IndexZero => 0,
        AttractorMode::MaxMass => {
            let mut best = 0usize;
            for (n, &m) in masses.iter().enumerate() {
                if m > masses[best] {
                    best = n;
                }
            }
            best
        }
    })
}

/// Inverted index distance `d = 1 / |p1 - pn|`, so the force factor
/// `m / d^2` grows quadratically with index separation.
pub fn distance(p1: usize, pn: usize) -> Result<f64> {
    if p1 == pn {
        return Err(CoreError::SelfDistance { index: p1 });
    }
    Ok(1.0 / p1.abs_diff(pn) as f64)
}

/// Newton-form force between the attractor (mass `m1`) and filter `n`.
pub fn gravity_force(m1: f64, mn: f64, d: f64, g: f64) -> f64 {
    g * m1 * mn / (d * d)
}

/// Masses, attractor, distances and forces for one prunable layer, with a
/// fixed attractor override for per-epoch freezing.
pub fn layer_state(
    weight: &TensorRec,
    mode: AttractorMode,
    g: f64,
    fixed_attractor: Option<usize>,
) -> Result<LayerGravityState> {
    let masses = layer_masses(weight);
    let attractor = match fixed_attractor {
        Some(p1) => p1,
        None => select_attractor(&masses, mode)?,
    };
    let n = masses.len();
    let mut distances = vec![0.0f64; n];
    let mut forces = vec![0.0f64; n];
    let mut total = 0.0f64;
    for i in 0..n {
        if i == attractor {
            continue; // the attractor exerts no force on itself
        }
        let d = distance(attractor, i)?;
        distances[i] = d;
        forces[i] = gravity_force(masses[attractor], masses[i], d, g);
        total += forces[i];
    }
    Ok(LayerGravityState {
        masses,
        attractor_index: attractor,
        distances,
        forces,
        total_force: total,
    })
}

/// Gravity state of one layer under `cfg`, which must list the layer.
pub fn layer_penalty(
    model: &ModelGraph,
    layer: LayerId,
    cfg: &GravityConfig,
) -> Result<LayerGravityState> {
    if !cfg.prune_layers.contains(&layer) {
        return Err(CoreError::NotPrunable {
            layer: model.layer(layer).name.clone(),
        });
    }
    let weight = model.conv_weight(layer).ok_or_else(|| CoreError::NotPrunable {
        layer: model.layer(layer).name.clone(),
    })?;
    layer_state(weight, cfg.attractor_mode, cfg.g, None)
}

/// Penalty gradient for one layer's weights: for filter `n != p1` each entry
/// gets `alpha_g * G * m1 * (p1 - pn)^2 * sign(w)`; the attractor block is
/// zero, and `sign(0) = 0` keeps dead weights dead.
pub fn penalty_gradient_from_state(
    weight: &TensorRec,
    state: &LayerGravityState,
    alpha_g: f64,
    g: f64,
) -> TensorRec {
    let mut grad = TensorRec::zeros(weight.shape());
    let m1 = state.masses[state.attractor_index];
    for n in 0..weight.dim(0) {
        if n == state.attractor_index {
            continue;
        }
        let sep = state.attractor_index.abs_diff(n) as f64;
        let coef = (alpha_g * g * m1 * sep * sep) as f32;
        let src = weight.slab(n);
        let dst = grad.slab_mut(n);
        for (d, &w) in dst.iter_mut().zip(src) {
            *d = coef * sign(w);
        }
    }
    grad
}

/// Convenience wrapper computing the state and its gradient in one go.
pub fn penalty_gradient(
    model: &ModelGraph,
    layer: LayerId,
    cfg: &GravityConfig,
) -> Result<TensorRec> {
    let state = layer_penalty(model, layer, cfg)?;
    let weight = model.conv_weight(layer).expect("checked by layer_penalty");
    Ok(penalty_gradient_from_state(weight, &state, cfg.alpha_g, cfg.g))
}

fn sign(w: f32) -> f32 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Add the gravity penalty gradients into `grads` for every layer in the
/// prunable set. Returns the per-layer states for logging. `fixed_attractors`
/// overrides attractor selection when it is frozen for the epoch.
pub fn add_penalty_gradients(
    model: &ModelGraph,
    grads: &mut GradMap,
    cfg: &GravityConfig,
    fixed_attractors: Option<&[(LayerId, usize)]>,
) -> Result<Vec<(LayerId, LayerGravityState)>> {
    let mut states = Vec::with_capacity(cfg.prune_layers.len());
    for &id in &cfg.prune_layers {
        let weight = model.conv_weight(id).ok_or_else(|| CoreError::NotPrunable {
            layer: model.layer(id).name.clone(),
        })?;
        let fixed = fixed_attractors.and_then(|f| {
            f.iter()
                .find(|(layer, _)| *layer == id)
                .map(|(_, p1)| *p1)
        });
        let state = layer_state(weight, cfg.attractor_mode, cfg.g, fixed)?;
        let pgrad = penalty_gradient_from_state(weight, &state, cfg.alpha_g, cfg.g);
        match grads.layers[id].as_mut() {
            Some(LayerGrads::Conv { weight: dw, .. }) => {
                for (a, v) in dw.data_mut().iter_mut().zip(pgrad.data()) {
                    *a += v;
                }
            }
            _ => {
                return Err(CoreError::NotPrunable {
                    layer: model.layer(id).name.clone(),
                })
            }
        }
        states.push((id, state));
    }
    Ok(states)
}

/// Outcome of one regularized step.
#[derive(Debug)]
pub struct StepOutcome {
    pub loss: f32,
    pub correct: usize,
    pub states: Vec<(LayerId, LayerGravityState)>,
}

/// One training step of the regularized objective: data gradient plus the
/// gravity penalty on the prunable layers, then a single SGD update.
pub fn regularized_step(
    model: &mut ModelGraph,
    batch: &TensorRec,
    labels: &[u32],
    cfg: &GravityConfig,
    epsilon: f32,
) -> Result<StepOutcome> {
    let pass = backward::backward(model, batch, labels)?;
    let mut grads = pass.grads;
    let states = if cfg.alpha_g > 0.0 {
        add_penalty_gradients(model, &mut grads, cfg, None)?
    } else {
        Vec::new()
    };
    optim::sgd_step(model, &grads, epsilon)?;
    Ok(StepOutcome {
        loss: pass.loss,
        correct: backward::count_correct(&pass.logits, labels),
        states,
    })
}
