//! Analytic parameter and FLOP counts.
//!
//! Convention: FLOPs = 2 * multiply-accumulates, counted for conv and linear
//! layers only; batchnorm, activations and pooling count as zero. Parameters
//! count learnable tensors (conv/linear weights and biases, batchnorm scale
//! and shift); running statistics are buffers, not parameters. Conv MACs are
//! `N * C * K^2 * H_out * W_out` per sample.

use crate::error::{CoreError, Result};
use crate::graph::{LayerKind, ModelGraph, ValueShape};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

/// Per-sample cost of every layer plus totals.
pub fn cost_model(model: &ModelGraph) -> Result<CostReport> {
    let shapes = model.infer_shapes()?;
    let mut layers = Vec::with_capacity(model.layers().len());
    for (id, layer) in model.layers().iter().enumerate() {
        let (params, flops) = match layer.kind {
            LayerKind::Conv2d {
                out_filters,
                in_channels,
                kernel,
                has_bias,
                ..
            } => {
                let ValueShape::Chw(_, oh, ow) = shapes[id] else {
                    unreachable!("conv produces CHW");
                };
                let weights = (out_filters * in_channels * kernel * kernel) as u64;
                let params = weights + if has_bias { out_filters as u64 } else { 0 };
                let macs = weights * (oh * ow) as u64;
                (params, 2 * macs)
            }
            LayerKind::Linear {
                in_features,
                out_features,
                has_bias,
            } => {
                let weights = (out_features * in_features) as u64;
                let params = weights + if has_bias { out_features as u64 } else { 0 };
                (params, 2 * weights)
            }
            LayerKind::BatchNorm { channels } => ((2 * channels) as u64, 0),
            _ => (0, 0),
        };
        layers.push(LayerCost {
            name: layer.name.clone(),
            kind: layer.kind.tag(),
            params,
            flops,
        });
    }
    let total_params = layers.iter().map(|l| l.params).sum();
    let total_flops = layers.iter().map(|l| l.flops).sum();
    Ok(CostReport {
        layers,
        total_params,
        total_flops,
    })
}

/// `(speedup, compression)` of a pruned report against its baseline.
pub fn speedup_compression(base: &CostReport, pruned: &CostReport) -> Result<(f64, f64)> {
    if pruned.total_flops == 0 || pruned.total_params == 0 {
        return Err(CoreError::InvalidGraph(
            "pruned model has zero cost".into(),
        ));
    }
    Ok((
        base.total_flops as f64 / pruned.total_flops as f64,
        base.total_params as f64 / pruned.total_params as f64,
    ))
}
