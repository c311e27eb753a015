//! L1-ranked local structured pruning with real model surgery.
//!
//! Filters are ranked by the L1 norm of their weights inside each prunable
//! layer independently; the lowest-normed `ceil(N * rate)` are removed
//! (always keeping at least one). Surgery drops the filter's output channel
//! from the conv, the matching batchnorm channel, and the matching input
//! slices of every consumer, walking through channel-preserving layers. A
//! layer whose channels reach an add-join is rejected: its width is tied to
//! another producer's and cannot be cut locally.

use crate::error::{CoreError, Result};
use crate::graph::{LayerId, LayerKind, LayerParams, ModelGraph, Src, ValueShape};
use crate::gravity;
use crate::tensor::TensorRec;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const PLAN_VERSION: u32 = 1;

/// Per-layer keep decision and the scores it was ranked by.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanLayer {
    pub name: String,
    /// One flag per filter; `true` keeps it.
    pub keep: Vec<bool>,
    /// L1 norms at plan time.
    pub scores: Vec<f64>,
}

impl PlanLayer {
    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn removed_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    /// Uniform pruning rate the plan was built at.
    pub rate: f64,
    pub layers: BTreeMap<LayerId, PlanLayer>,
}

/// Filter indices ordered by ascending L1 norm; equal norms keep index order,
/// so earlier filters are pruned first on ties.
pub fn rank_filters(weight: &TensorRec) -> Vec<usize> {
    let masses = gravity::layer_masses(weight);
    let mut order: Vec<usize> = (0..masses.len()).collect();
    order.sort_by(|&a, &b| {
        masses[a]
            .partial_cmp(&masses[b])
            .expect("finite norms")
            .then(a.cmp(&b))
    });
    order
}

/// Number of filters removed at `rate` from a layer of `n`, never emptying it.
pub fn removed_at_rate(n: usize, rate: f64) -> usize {
    let raw = (n as f64 * rate).ceil() as usize;
    raw.min(n - 1)
}

/// Build a uniform-rate plan over `layers` (defaults to the model's prunable
/// set when empty would be invalid, so pass the set explicitly).
pub fn make_pruning_plan(
    model: &ModelGraph,
    rate: f64,
    layers: &[LayerId],
) -> Result<PruningPlan> {
    if !(0.0..1.0).contains(&rate) {
        return Err(CoreError::InvalidRate(rate));
    }
    let prunable = model.structurally_prunable();
    let mut plan_layers = BTreeMap::new();
    for &id in layers {
        if !prunable.contains(&id) {
            return Err(CoreError::NotPrunable {
                layer: match id < model.layers().len() {
                    true => model.layer(id).name.clone(),
                    false => format!("#{id}"),
                },
            });
        }
        let weight = model.conv_weight(id).expect("prunable implies conv");
        let scores = gravity::layer_masses(weight);
        let order = rank_filters(weight);
        let n = order.len();
        let removed = removed_at_rate(n, rate);
        let mut keep = vec![true; n];
        for &idx in order.iter().take(removed) {
            keep[idx] = false;
        }
        plan_layers.insert(
            id,
            PlanLayer {
                name: model.layer(id).name.clone(),
                keep,
                scores,
            },
        );
    }
    Ok(PruningPlan {
        rate,
        layers: plan_layers,
    })
}

/// Apply a plan, producing a smaller model. The input model is unchanged.
pub fn apply_plan(model: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph> {
    validate_plan(model, plan)?;
    let shapes = model.infer_shapes()?;
    let consumers = model.consumer_map();

    let mut layers: Vec<_> = model.layers().to_vec();
    let mut params: Vec<Option<LayerParams>> =
        (0..layers.len()).map(|id| model.params(id).cloned()).collect();

    for (&conv_id, plan_layer) in &plan.layers {
        let kept = plan_layer.kept_indices();
        if kept.len() == plan_layer.keep.len() {
            continue; // all-keep: nothing to cut
        }

        // shrink the producing conv
        match (&mut layers[conv_id].kind, params[conv_id].as_mut()) {
            (
                LayerKind::Conv2d { out_filters, .. },
                Some(LayerParams::Conv { weight, bias }),
            ) => {
                *out_filters = kept.len();
                *weight = weight.select_axis0(&kept);
                if let Some(b) = bias {
                    *b = b.select_axis0(&kept);
                }
            }
            _ => unreachable!("validated plan targets convs"),
        }

        // walk the channel-preserving consumers and adapt them
        let mut stack = vec![conv_id];
        let mut seen = vec![false; layers.len()];
        seen[conv_id] = true;
        while let Some(v) = stack.pop() {
            for &m in &consumers[v] {
                let first_input = layers[m].inputs[0];
                match &mut layers[m].kind {
                    LayerKind::BatchNorm { channels } => {
                        *channels = kept.len();
                        if let Some(LayerParams::Bn {
                            gamma,
                            beta,
                            running_mean,
                            running_var,
                        }) = params[m].as_mut()
                        {
                            *gamma = gamma.select_axis0(&kept);
                            *beta = beta.select_axis0(&kept);
                            *running_mean = running_mean.select_axis0(&kept);
                            *running_var = running_var.select_axis0(&kept);
                        }
                        if !seen[m] {
                            seen[m] = true;
                            stack.push(m);
                        }
                    }
                    LayerKind::Relu
                    | LayerKind::MaxPool { .. }
                    | LayerKind::AvgPool { .. }
                    | LayerKind::Flatten => {
                        if !seen[m] {
                            seen[m] = true;
                            stack.push(m);
                        }
                    }
                    LayerKind::Conv2d { in_channels, .. } => {
                        *in_channels = kept.len();
                        if let Some(LayerParams::Conv { weight, .. }) = params[m].as_mut() {
                            *weight = weight.select_axis1(&kept);
                        }
                    }
                    LayerKind::Linear { in_features, .. } => {
                        // the producer of this linear's flat input fixes the
                        // per-channel spatial extent
                        let flat_src = match first_input {
                            Src::Layer(p) => p,
                            Src::Input => unreachable!("linear after input"),
                        };
                        let hw = spatial_behind_flat(model, flat_src, &shapes);
                        let mut cols = Vec::with_capacity(kept.len() * hw);
                        for &c in &kept {
                            cols.extend((c * hw)..(c + 1) * hw);
                        }
                        *in_features = cols.len();
                        if let Some(LayerParams::Linear { weight, .. }) = params[m].as_mut() {
                            *weight = weight.select_axis1(&cols);
                        }
                    }
                    LayerKind::Add => {
                        return Err(CoreError::NotPrunable {
                            layer: layers[m].name.clone(),
                        });
                    }
                }
            }
        }
    }

    let mut pruned = ModelGraph::new(model.input_shape, layers)?;
    for (id, p) in params.into_iter().enumerate() {
        pruned.set_params(id, p);
    }
    pruned.validate()?;
    pruned.opt_steps = model.opt_steps;
    Ok(pruned)
}

/// Spatial extent (h*w) per channel of the value produced by `id`, using the
/// original model's shape inference. Pruning only drops channels, so spatial
/// extents are unchanged by surgery.
fn spatial_behind_flat(model: &ModelGraph, id: LayerId, shapes: &[ValueShape]) -> usize {
    // walk back through the flatten chain to a CHW value
    let mut cur = id;
    loop {
        match shapes[cur] {
            ValueShape::Chw(_, h, w) => return h * w,
            ValueShape::Flat(_) => match model.layer(cur).inputs[0] {
                Src::Layer(p) => cur = p,
                Src::Input => {
                    let (_, h, w) = model.input_shape;
                    return h * w;
                }
            },
        }
    }
}

/// Zero out the pruned filters instead of removing them: conv rows and bias
/// entries, plus gamma/beta of the batchnorm owning each channel. The result
/// is forward-equivalent to the surgically pruned model.
pub fn mask_filters(model: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph> {
    validate_plan(model, plan)?;
    let consumers = model.consumer_map();
    let mut masked = model.clone();
    for (&conv_id, plan_layer) in &plan.layers {
        let removed: Vec<usize> = plan_layer
            .keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| !k)
            .map(|(i, _)| i)
            .collect();
        if let Some(LayerParams::Conv { weight, bias }) = masked.params_mut(conv_id) {
            for &n in &removed {
                weight.slab_mut(n).fill(0.0);
                if let Some(b) = bias {
                    b.data_mut()[n] = 0.0;
                }
            }
        }
        // silence the channel through any batchnorm chain
        let mut stack = vec![conv_id];
        let mut seen = vec![false; model.layers().len()];
        seen[conv_id] = true;
        while let Some(v) = stack.pop() {
            for &m in &consumers[v] {
                match model.layer(m).kind {
                    LayerKind::BatchNorm { .. } => {
                        if let Some(LayerParams::Bn { gamma, beta, .. }) = masked.params_mut(m) {
                            for &n in &removed {
                                gamma.data_mut()[n] = 0.0;
                                beta.data_mut()[n] = 0.0;
                            }
                        }
                        if !seen[m] {
                            seen[m] = true;
                            stack.push(m);
                        }
                    }
                    LayerKind::Relu
                    | LayerKind::MaxPool { .. }
                    | LayerKind::AvgPool { .. }
                    | LayerKind::Flatten
                        if !seen[m] =>
                    {
                        seen[m] = true;
                        stack.push(m);
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(masked)
}

fn validate_plan(model: &ModelGraph, plan: &PruningPlan) -> Result<()> {
    let prunable = model.structurally_prunable();
    for (&id, layer) in &plan.layers {
        if !prunable.contains(&id) {
            return Err(CoreError::NotPrunable {
                layer: match id < model.layers().len() {
                    true => model.layer(id).name.clone(),
                    false => format!("#{id}"),
                },
            });
        }
        let weight = model.conv_weight(id).expect("prunable implies conv");
        if layer.keep.len() != weight.dim(0) {
            return Err(CoreError::MaskLenMismatch {
                layer: model.layer(id).name.clone(),
                expected: weight.dim(0),
                got: layer.keep.len(),
            });
        }
        if layer.kept_indices().is_empty() {
            return Err(CoreError::InvalidGraph(format!(
                "plan empties layer '{}'",
                model.layer(id).name
            )));
        }
    }
    Ok(())
}

// -- plan files ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PlanFile {
    version: u32,
    rate: f64,
    layers: Vec<PlanFileLayer>,
}

#[derive(Serialize, Deserialize)]
struct PlanFileLayer {
    name: String,
    filters: usize,
    kept: Vec<usize>,
    scores: Vec<f64>,
}

/// Write a plan as versioned TOML: layer name, kept-filter indices, rate and
/// the score snapshot.
pub fn save_plan(plan: &PruningPlan, path: &Path) -> Result<()> {
    let file = PlanFile {
        version: PLAN_VERSION,
        rate: plan.rate,
        layers: plan
            .layers
            .values()
            .map(|l| PlanFileLayer {
                name: l.name.clone(),
                filters: l.keep.len(),
                kept: l.kept_indices(),
                scores: l.scores.clone(),
            })
            .collect(),
    };
    let text = toml::to_string_pretty(&file)
        .map_err(|e| CoreError::PlanFormat(format!("serialize: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Read a plan back, resolving layer names against `model`.
pub fn load_plan(path: &Path, model: &ModelGraph) -> Result<PruningPlan> {
    let text = std::fs::read_to_string(path)?;
    let file: PlanFile =
        toml::from_str(&text).map_err(|e| CoreError::PlanFormat(format!("parse: {e}")))?;
    if file.version != PLAN_VERSION {
        return Err(CoreError::PlanFormat(format!(
            "unsupported plan version {}",
            file.version
        )));
    }
    let mut layers = BTreeMap::new();
    for l in file.layers {
        let id = model
            .layer_id(&l.name)
            .ok_or_else(|| CoreError::PlanFormat(format!("unknown layer '{}'", l.name)))?;
        let mut keep = vec![false; l.filters];
        for idx in l.kept {
            if idx >= l.filters {
                return Err(CoreError::PlanFormat(format!(
                    "kept index {idx} out of range for '{}'",
                    l.name
                )));
            }
            keep[idx] = true;
        }
        layers.insert(
            id,
            PlanLayer {
                name: l.name,
                keep,
                scores: l.scores,
            },
        );
    }
    Ok(PruningPlan {
        rate: file.rate,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::build_model;

    fn weights_with_norms(norms: &[f32]) -> TensorRec {
        TensorRec::from_vec(&[norms.len(), 1, 1, 1], norms.to_vec()).unwrap()
    }

    #[test]
    fn ranking_is_ascending_with_index_ties() {
        assert_eq!(rank_filters(&weights_with_norms(&[3.0, 1.0, 2.0])), vec![1, 2, 0]);
        assert_eq!(rank_filters(&weights_with_norms(&[2.0, 2.0, 2.0])), vec![0, 1, 2]);
    }

    #[test]
    fn ranking_matches_reference_sort() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = TensorRec::from_vec(
            &[12, 3, 3, 3],
            (0..12 * 27).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let got = rank_filters(&w);
        // reference: brute-force L1 per filter, stable sort
        let mut norms: Vec<(usize, f64)> = (0..12)
            .map(|n| {
                let mut s = 0.0f64;
                for &v in w.slab(n) {
                    s += (v as f64).abs();
                }
                (n, s)
            })
            .collect();
        norms.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let want: Vec<usize> = norms.into_iter().map(|(n, _)| n).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn removed_counts_follow_ceil_with_min_keep() {
        assert_eq!(removed_at_rate(10, 0.0), 0);
        assert_eq!(removed_at_rate(10, 0.5), 5);
        // fractional count rounds up: 3 * 0.5 -> 2 removed, 1 kept
        assert_eq!(removed_at_rate(3, 0.5), 2);
        assert_eq!(removed_at_rate(16, 0.1), 2);
        // a layer is never emptied
        assert_eq!(removed_at_rate(1, 0.9), 0);
        assert_eq!(removed_at_rate(4, 0.99), 3);
    }

    const TOY: &str = "
input 3 8 8
conv c1 filters=6 kernel=3 pad=1 bias=false
relu r1
conv c2 filters=8 kernel=3 pad=1
relu r2
maxpool p kernel=2
flatten f
linear fc out=4
";

    #[test]
    fn zero_rate_plan_keeps_everything_and_is_identity() {
        let model = build_model(TOY, 21).unwrap();
        let set = model.default_prune_set();
        let plan = make_pruning_plan(&model, 0.0, &set).unwrap();
        assert!(plan.layers.values().all(|l| l.removed_count() == 0));
        let pruned = apply_plan(&model, &plan).unwrap();
        assert_eq!(model, pruned);
    }

    #[test]
    fn rate_out_of_range_is_rejected() {
        let model = build_model(TOY, 21).unwrap();
        let set = model.default_prune_set();
        assert!(make_pruning_plan(&model, 1.0, &set).is_err());
        assert!(make_pruning_plan(&model, -0.1, &set).is_err());
        assert!(make_pruning_plan(&model, 0.99, &set).is_ok());
    }

    #[test]
    fn lowest_norm_filters_are_removed() {
        let mut model = build_model(TOY, 21).unwrap();
        let c2 = model.layer_id("c2").unwrap();
        // make filter norms of c2 proportional to 8 - n, so high indices go first
        if let Some(LayerParams::Conv { weight, .. }) = model.params_mut(c2) {
            for n in 0..8 {
                let v = (8 - n) as f32 * 0.1;
                weight.slab_mut(n).fill(v);
            }
        }
        let plan = make_pruning_plan(&model, 0.5, &[c2]).unwrap();
        let kept = plan.layers[&c2].kept_indices();
        assert_eq!(kept, vec![0, 1, 2, 3]);
    }

    #[test]
    fn surgery_shrinks_consumer_and_classifier() {
        let model = build_model(TOY, 21).unwrap();
        let set = model.default_prune_set(); // just c2: c1 is the stem
        assert_eq!(set.len(), 1);
        let plan = make_pruning_plan(&model, 0.5, &set).unwrap();
        let pruned = apply_plan(&model, &plan).unwrap();
        let c2 = pruned.layer_id("c2").unwrap();
        match &pruned.layer(c2).kind {
            LayerKind::Conv2d { out_filters, .. } => assert_eq!(*out_filters, 4),
            _ => unreachable!(),
        }
        match &pruned.layer(pruned.layer_id("fc").unwrap()).kind {
            LayerKind::Linear { in_features, .. } => assert_eq!(*in_features, 4 * 4 * 4),
            _ => unreachable!(),
        }
        pruned.validate().unwrap();
    }

    #[test]
    fn plan_for_non_prunable_layer_is_rejected() {
        let model = build_model(
            "
input 3 8 8
conv c1 filters=4 kernel=3 pad=1 bias=false
relu r1
conv c2 filters=4 kernel=3 pad=1 bias=false
add j from=r1,c2
flatten f
linear fc out=2
",
            3,
        )
        .unwrap();
        let c2 = model.layer_id("c2").unwrap();
        assert!(matches!(
            make_pruning_plan(&model, 0.3, &[c2]),
            Err(CoreError::NotPrunable { .. })
        ));
    }

    #[test]
    fn mask_length_mismatch_is_rejected() {
        let model = build_model(TOY, 21).unwrap();
        let c2 = model.layer_id("c2").unwrap();
        let mut plan = make_pruning_plan(&model, 0.5, &[c2]).unwrap();
        plan.layers.get_mut(&c2).unwrap().keep.pop();
        assert!(matches!(
            apply_plan(&model, &plan),
            Err(CoreError::MaskLenMismatch { .. })
        ));
    }

    #[test]
    fn plan_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(TOY, 21).unwrap();
        let c2 = model.layer_id("c2").unwrap();
        let plan = make_pruning_plan(&model, 0.25, &[c2]).unwrap();
        let path = dir.path().join("plan.toml");
        save_plan(&plan, &path).unwrap();
        let loaded = load_plan(&path, &model).unwrap();
        assert_eq!(plan, loaded);
    }
}
