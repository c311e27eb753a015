//! Forward evaluation.
//!
//! Two modes share the same kernels: `forward` is the pure inference pass
//! (batchnorm uses running statistics), `forward_train` caches every layer
//! output plus the batch statistics the backward pass and the running-stat
//! update need. All accumulation is sequential f32, so results are
//! reproducible bit-for-bit.

use crate::error::{CoreError, Result};
use crate::graph::{LayerKind, LayerParams, ModelGraph, Src};
use crate::tensor::TensorRec;

/// Per-channel batch statistics of one batchnorm layer.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f32>,
    /// Biased variance, as used for normalization.
    pub var: Vec<f32>,
    /// Elements reduced per channel (batch * height * width).
    pub count: usize,
}

pub const BN_EPS: f32 = 1e-5;

#[derive(Debug)]
pub struct ForwardCache {
    /// Output of every layer, indexed by layer id.
    pub outputs: Vec<TensorRec>,
    /// Batch statistics for batchnorm layers (train mode only).
    pub bn_stats: Vec<Option<BnStats>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &TensorRec {
        self.outputs.last().expect("non-empty graph")
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Eval,
    Train,
}

/// Inference pass; returns logits `[batch, classes]`.
pub fn forward(model: &ModelGraph, batch: &TensorRec) -> Result<TensorRec> {
    let mut cache = run(model, batch, Mode::Eval)?;
    Ok(cache.outputs.pop().expect("non-empty graph"))
}

/// Training pass with cached activations and batch statistics.
pub fn forward_train(model: &ModelGraph, batch: &TensorRec) -> Result<ForwardCache> {
    run(model, batch, Mode::Train)
}

fn run(model: &ModelGraph, batch: &TensorRec, mode: Mode) -> Result<ForwardCache> {
    let (c, h, w) = model.input_shape;
    if batch.rank() != 4 || batch.shape()[1..] != [c, h, w] {
        return Err(CoreError::ShapeMismatch {
            layer: "<input>".into(),
            msg: format!(
                "batch shape {:?} does not match input [*, {c}, {h}, {w}]",
                batch.shape()
            ),
        });
    }
    batch.check_finite("input batch")?;

    let n_layers = model.layers().len();
    let mut outputs: Vec<TensorRec> = Vec::with_capacity(n_layers);
    let mut bn_stats: Vec<Option<BnStats>> = vec![None; n_layers];

    for (id, layer) in model.layers().iter().enumerate() {
        let value = |s: &Src| -> &TensorRec {
            match s {
                Src::Input => batch,
                Src::Layer(p) => &outputs[*p],
            }
        };
        let x = value(&layer.inputs[0]);
        let out = match &layer.kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => {
                let Some(LayerParams::Conv { weight, bias }) = model.params(id) else {
                    unreachable!("validated conv has params");
                };
                conv2d(x, weight, bias.as_ref(), *stride, *padding)
            }
            LayerKind::BatchNorm { .. } => {
                let Some(LayerParams::Bn {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                }) = model.params(id)
                else {
                    unreachable!("validated bn has params");
                };
                match mode {
                    Mode::Eval => bn_apply(x, gamma, beta, running_mean.data(), running_var.data()),
                    Mode::Train => {
                        let stats = bn_batch_stats(x);
                        let out = bn_apply(x, gamma, beta, &stats.mean, &stats.var);
                        bn_stats[id] = Some(stats);
                        out
                    }
                }
            }
            LayerKind::Relu => relu(x),
            LayerKind::MaxPool { kernel, stride } => maxpool(x, *kernel, *stride),
            LayerKind::AvgPool { kernel, stride } => avgpool(x, *kernel, *stride),
            LayerKind::Linear { .. } => {
                let Some(LayerParams::Linear { weight, bias }) = model.params(id) else {
                    unreachable!("validated linear has params");
                };
                linear(x, weight, bias.as_ref())
            }
            LayerKind::Add => add(x, value(&layer.inputs[1])),
            LayerKind::Flatten => flatten(x),
        };
        out.check_finite(&layer.name)?;
        outputs.push(out);
    }
    Ok(ForwardCache { outputs, bn_stats })
}

/// Valid output-coordinate range `[lo, hi)` so that `o*stride + k - pad`
/// stays inside `[0, extent_in)`.
pub(crate) fn out_range(
    extent_in: usize,
    extent_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if extent_in + pad > k {
        ((extent_in - 1 + pad - k) / stride + 1).min(extent_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold one sample into patch-rows: row `q = (c*k + kh)*k + kw` holds the
/// input value under kernel tap `(c, kh, kw)` for every output position `j`,
/// zero where the tap falls into padding. Accumulating over `q` in order
/// reproduces the direct loop nest's summation order exactly.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    xd: &[f32],
    sample_base: usize,
    cin: usize,
    ih: usize,
    iw: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    debug_assert_eq!(col.len(), cin * k * k * oh * ow);
    col.fill(0.0);
    let cols = oh * ow;
    for c in 0..cin {
        let x_base = sample_base + c * ih * iw;
        for kh in 0..k {
            let (oh_lo, oh_hi) = out_range(ih, oh, kh, stride, pad);
            for kw in 0..k {
                let (ow_lo, ow_hi) = out_range(iw, ow, kw, stride, pad);
                if ow_lo >= ow_hi {
                    continue;
                }
                let q = (c * k + kh) * k + kw;
                let col_row = q * cols;
                for o_h in oh_lo..oh_hi {
                    let i_h = o_h * stride + kh - pad;
                    let x_row = x_base + i_h * iw;
                    let dst = &mut col[col_row + o_h * ow + ow_lo..col_row + o_h * ow + ow_hi];
                    if stride == 1 {
                        let src = &xd[x_row + ow_lo + kw - pad..x_row + ow_hi + kw - pad];
                        dst.copy_from_slice(src);
                    } else {
                        for (d, o_w) in dst.iter_mut().zip(ow_lo..ow_hi) {
                            *d = xd[x_row + o_w * stride + kw - pad];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d(
    x: &TensorRec,
    weight: &TensorRec,
    bias: Option<&TensorRec>,
    stride: usize,
    pad: usize,
) -> TensorRec {
    let (bsz, cin, ih, iw) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (nf, k) = (weight.dim(0), weight.dim(2));
    let oh = crate::graph::out_extent(ih, k, stride, pad);
    let ow = crate::graph::out_extent(iw, k, stride, pad);
    let taps = cin * k * k;
    let cols = oh * ow;
    let mut y = TensorRec::zeros(&[bsz, nf, oh, ow]);
    let xd = x.data();
    let wd = weight.data();
    let yd = y.data_mut();
    let mut col = vec![0.0f32; taps * cols];
    for b in 0..bsz {
        im2col(xd, b * cin * ih * iw, cin, ih, iw, k, stride, pad, oh, ow, &mut col);
        for n in 0..nf {
            let y_row = &mut yd[(b * nf + n) * cols..(b * nf + n + 1) * cols];
            if let Some(bias) = bias {
                y_row.fill(bias.data()[n]);
            }
            let w_row = &wd[n * taps..(n + 1) * taps];
            for (q, &wv) in w_row.iter().enumerate() {
                let col_row = &col[q * cols..(q + 1) * cols];
                for (yv, &cv) in y_row.iter_mut().zip(col_row) {
                    *yv += wv * cv;
                }
            }
        }
    }
    y
}

pub(crate) fn bn_batch_stats(x: &TensorRec) -> BnStats {
    let (bsz, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let hw = h * w;
    let m = (bsz * hw) as f32;
    let xd = x.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f32;
        for b in 0..bsz {
            let base = ((b * c) + ch) * hw;
            for v in &xd[base..base + hw] {
                sum += v;
            }
        }
        let mu = sum / m;
        let mut sq = 0.0f32;
        for b in 0..bsz {
            let base = ((b * c) + ch) * hw;
            for v in &xd[base..base + hw] {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    BnStats {
        mean,
        var,
        count: bsz * hw,
    }
}

pub(crate) fn bn_apply(
    x: &TensorRec,
    gamma: &TensorRec,
    beta: &TensorRec,
    mean: &[f32],
    var: &[f32],
) -> TensorRec {
    let (bsz, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let hw = h * w;
    let mut y = TensorRec::zeros(&[bsz, c, h, w]);
    let xd = x.data();
    let yd = y.data_mut();
    for ch in 0..c {
        let inv_std = 1.0 / (var[ch] + BN_EPS).sqrt();
        let scale = gamma.data()[ch] * inv_std;
        let shift = beta.data()[ch] - mean[ch] * scale;
        for b in 0..bsz {
            let base = ((b * c) + ch) * hw;
            for i in base..base + hw {
                yd[i] = xd[i] * scale + shift;
            }
        }
    }
    y
}

pub(crate) fn relu(x: &TensorRec) -> TensorRec {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

pub(crate) fn maxpool(x: &TensorRec, k: usize, stride: usize) -> TensorRec {
    let (bsz, c, ih, iw) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let oh = crate::graph::out_extent(ih, k, stride, 0);
    let ow = crate::graph::out_extent(iw, k, stride, 0);
    let mut y = TensorRec::zeros(&[bsz, c, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for bc in 0..bsz * c {
        let x_base = bc * ih * iw;
        let y_base = bc * oh * ow;
        for o_h in 0..oh {
            for o_w in 0..ow {
                // ties keep the first maximum, scanning row-major
                let mut best = f32::NEG_INFINITY;
                for kh in 0..k {
                    let row = x_base + (o_h * stride + kh) * iw + o_w * stride;
                    for kw in 0..k {
                        let v = xd[row + kw];
                        if v > best {
                            best = v;
                        }
                    }
                }
                yd[y_base + o_h * ow + o_w] = best;
            }
        }
    }
    y
}

pub(crate) fn avgpool(x: &TensorRec, k: usize, stride: usize) -> TensorRec {
    let (bsz, c, ih, iw) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let oh = crate::graph::out_extent(ih, k, stride, 0);
    let ow = crate::graph::out_extent(iw, k, stride, 0);
    let inv = 1.0 / (k * k) as f32;
    let mut y = TensorRec::zeros(&[bsz, c, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for bc in 0..bsz * c {
        let x_base = bc * ih * iw;
        let y_base = bc * oh * ow;
        for o_h in 0..oh {
            for o_w in 0..ow {
                let mut sum = 0.0f32;
                for kh in 0..k {
                    let row = x_base + (o_h * stride + kh) * iw + o_w * stride;
                    for kw in 0..k {
                        sum += xd[row + kw];
                    }
                }
                yd[y_base + o_h * ow + o_w] = sum * inv;
            }
        }
    }
    y
}

pub(crate) fn linear(x: &TensorRec, weight: &TensorRec, bias: Option<&TensorRec>) -> TensorRec {
    let (bsz, nin) = (x.dim(0), x.dim(1));
    let nout = weight.dim(0);
    let mut y = TensorRec::zeros(&[bsz, nout]);
    let xd = x.data();
    let wd = weight.data();
    let yd = y.data_mut();
    for b in 0..bsz {
        let x_row = &xd[b * nin..(b + 1) * nin];
        for o in 0..nout {
            let w_row = &wd[o * nin..(o + 1) * nin];
            let mut sum = match bias {
                Some(t) => t.data()[o],
                None => 0.0,
            };
            for i in 0..nin {
                sum += x_row[i] * w_row[i];
            }
            yd[b * nout + o] = sum;
        }
    }
    y
}

pub(crate) fn add(a: &TensorRec, b: &TensorRec) -> TensorRec {
    let mut y = a.clone();
    for (v, w) in y.data_mut().iter_mut().zip(b.data()) {
        *v += w;
    }
    y
}

pub(crate) fn flatten(x: &TensorRec) -> TensorRec {
    let bsz = x.dim(0);
    let rest: usize = x.shape()[1..].iter().product();
    x.reshaped(&[bsz, rest]).expect("same element count")
}
