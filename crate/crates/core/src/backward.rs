//! Reverse-mode gradients of the softmax cross-entropy objective.
//!
//! `backward` recomputes a training-mode forward pass internally and walks
//! the graph in reverse, accumulating output gradients per layer (add-joins
//! and shared producers simply sum). The model itself is never mutated here;
//! running-statistic updates are the training loop's job.

use crate::error::{CoreError, Result};
use crate::forward::{self, BnStats, ForwardCache, BN_EPS};
use crate::graph::{LayerKind, LayerParams, ModelGraph, Src};
use crate::tensor::TensorRec;

/// Parameter gradients of one layer; shapes mirror `LayerParams`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    Conv {
        weight: TensorRec,
        bias: Option<TensorRec>,
    },
    Bn {
        gamma: TensorRec,
        beta: TensorRec,
    },
    Linear {
        weight: TensorRec,
        bias: Option<TensorRec>,
    },
}

/// Gradients for every parameter-bearing layer, indexed by layer id.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap {
    pub layers: Vec<Option<LayerGrads>>,
}

impl GradMap {
    /// All-zero gradients matching the model's parameter shapes.
    pub fn zeros_like(model: &ModelGraph) -> Self {
        let layers = (0..model.layers().len())
            .map(|id| {
                model.params(id).map(|p| match p {
                    LayerParams::Conv { weight, bias } => LayerGrads::Conv {
                        weight: TensorRec::zeros(weight.shape()),
                        bias: bias.as_ref().map(|b| TensorRec::zeros(b.shape())),
                    },
                    LayerParams::Bn { gamma, .. } => LayerGrads::Bn {
                        gamma: TensorRec::zeros(gamma.shape()),
                        beta: TensorRec::zeros(gamma.shape()),
                    },
                    LayerParams::Linear { weight, bias } => LayerGrads::Linear {
                        weight: TensorRec::zeros(weight.shape()),
                        bias: bias.as_ref().map(|b| TensorRec::zeros(b.shape())),
                    },
                })
            })
            .collect();
        GradMap { layers }
    }
}

/// Result of one data-loss backward pass.
#[derive(Debug)]
pub struct BackwardPass {
    pub loss: f32,
    pub logits: TensorRec,
    pub grads: GradMap,
    /// Batch statistics from the internal forward pass, for running-stat updates.
    pub bn_stats: Vec<Option<BnStats>>,
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &TensorRec, labels: &[u32]) -> Result<(f32, TensorRec)> {
    let (bsz, classes) = (logits.dim(0), logits.dim(1));
    if labels.len() != bsz {
        return Err(CoreError::ShapeMismatch {
            layer: "<loss>".into(),
            msg: format!("{} labels for batch of {bsz}", labels.len()),
        });
    }
    let mut dlogits = TensorRec::zeros(logits.shape());
    let ld = logits.data();
    let dd = dlogits.data_mut();
    let inv_b = 1.0 / bsz as f32;
    let mut loss = 0.0f32;
    for b in 0..bsz {
        let label = labels[b];
        if label as usize >= classes {
            return Err(CoreError::LabelOutOfRange { label, classes });
        }
        let row = &ld[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        loss += (lse - row[label as usize]) * inv_b;
        for c in 0..classes {
            let p = (row[c] - lse).exp();
            dd[b * classes + c] = (p - if c == label as usize { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    if !loss.is_finite() {
        return Err(CoreError::NonFinite {
            context: "cross-entropy loss".into(),
        });
    }
    Ok((loss, dlogits))
}

/// Correct top-1 predictions; argmax ties resolve to the lowest class index.
pub fn count_correct(logits: &TensorRec, labels: &[u32]) -> usize {
    let (bsz, classes) = (logits.dim(0), logits.dim(1));
    let ld = logits.data();
    let mut correct = 0;
    for b in 0..bsz {
        let row = &ld[b * classes..(b + 1) * classes];
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == labels[b] as usize {
            correct += 1;
        }
    }
    correct
}

/// Cross-entropy loss of a training-mode forward pass, without gradients.
pub fn evaluate_loss(model: &ModelGraph, batch: &TensorRec, labels: &[u32]) -> Result<f32> {
    let cache = forward::forward_train(model, batch)?;
    Ok(softmax_cross_entropy(cache.logits(), labels)?.0)
}

/// Full data-loss gradient for every parameter-bearing layer.
pub fn backward(model: &ModelGraph, batch: &TensorRec, labels: &[u32]) -> Result<BackwardPass> {
    let cache = forward::forward_train(model, batch)?;
    backward_from(model, batch, labels, cache)
}

pub fn backward_from(
    model: &ModelGraph,
    batch: &TensorRec,
    labels: &[u32],
    cache: ForwardCache,
) -> Result<BackwardPass> {
    let (loss, dlogits) = softmax_cross_entropy(cache.logits(), labels)?;
    let n_layers = model.layers().len();
    let mut grads = GradMap::zeros_like(model);
    // accumulated gradient w.r.t. each layer's output
    let mut dout: Vec<Option<TensorRec>> = vec![None; n_layers];
    dout[n_layers - 1] = Some(dlogits);

    for id in (0..n_layers).rev() {
        let layer = model.layer(id);
        let dy = dout[id].take().expect("every layer reaches the output");
        dy.check_finite(&format!("gradient at {}", layer.name))?;
        let input_of = |s: &Src| -> &TensorRec {
            match s {
                Src::Input => batch,
                Src::Layer(p) => &cache.outputs[*p],
            }
        };
        let x = input_of(&layer.inputs[0]);
        let mut dinputs: Vec<TensorRec> = Vec::with_capacity(layer.inputs.len());
        match &layer.kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => {
                let Some(LayerParams::Conv { weight, bias }) = model.params(id) else {
                    unreachable!()
                };
                let (dx, dw, db) = conv2d_backward(x, weight, bias.is_some(), &dy, *stride, *padding);
                grads.layers[id] = Some(LayerGrads::Conv {
                    weight: dw,
                    bias: db,
                });
                dinputs.push(dx);
            }
            LayerKind::BatchNorm { .. } => {
                let Some(LayerParams::Bn { gamma, .. }) = model.params(id) else {
                    unreachable!()
                };
                let stats = cache.bn_stats[id].as_ref().expect("train-mode stats");
                let (dx, dgamma, dbeta) = bn_backward(x, gamma, stats, &dy);
                grads.layers[id] = Some(LayerGrads::Bn {
                    gamma: dgamma,
                    beta: dbeta,
                });
                dinputs.push(dx);
            }
            LayerKind::Relu => {
                let mut dx = dy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                dinputs.push(dx);
            }
            LayerKind::MaxPool { kernel, stride } => {
                dinputs.push(maxpool_backward(x, &dy, *kernel, *stride));
            }
            LayerKind::AvgPool { kernel, stride } => {
                dinputs.push(avgpool_backward(x, &dy, *kernel, *stride));
            }
            LayerKind::Linear { .. } => {
                let Some(LayerParams::Linear { weight, bias }) = model.params(id) else {
                    unreachable!()
                };
                let (dx, dw, db) = linear_backward(x, weight, bias.is_some(), &dy);
                grads.layers[id] = Some(LayerGrads::Linear {
                    weight: dw,
                    bias: db,
                });
                dinputs.push(dx);
            }
            LayerKind::Add => {
                dinputs.push(dy.clone());
                dinputs.push(dy.clone());
            }
            LayerKind::Flatten => {
                dinputs.push(dy.reshaped(x.shape())?);
            }
        }
        for (src, dx) in layer.inputs.iter().zip(dinputs) {
            if let Src::Layer(p) = src {
                match &mut dout[*p] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(dx.data()) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(dx),
                }
            }
        }
    }

    let logits = cache.outputs.into_iter().next_back().expect("non-empty");
    Ok(BackwardPass {
        loss,
        logits,
        grads,
        bn_stats: cache.bn_stats,
    })
}

fn conv2d_backward(
    x: &TensorRec,
    weight: &TensorRec,
    has_bias: bool,
    dy: &TensorRec,
    stride: usize,
    pad: usize,
) -> (TensorRec, TensorRec, Option<TensorRec>) {
    let (bsz, cin, ih, iw) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (nf, k) = (weight.dim(0), weight.dim(2));
    let (oh, ow) = (dy.dim(2), dy.dim(3));
    let mut dx = TensorRec::zeros(x.shape());
    let mut dw = TensorRec::zeros(weight.shape());
    let mut db = has_bias.then(|| TensorRec::zeros(&[nf]));
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();

    if let Some(db) = db.as_mut() {
        // bias gradient: sum of the output error over batch and spatial positions
        let dbd = db.data_mut();
        for b in 0..bsz {
            for (n, db_n) in dbd.iter_mut().enumerate() {
                let base = ((b * nf) + n) * oh * ow;
                let mut sum = 0.0f32;
                for v in &dyd[base..base + oh * ow] {
                    sum += v;
                }
                *db_n += sum;
            }
        }
    }

    let taps = cin * k * k;
    let cols = oh * ow;
    let mut col = vec![0.0f32; taps * cols];
    let mut col_t = vec![0.0f32; cols * taps];
    let mut dcol = vec![0.0f32; taps * cols];
    for b in 0..bsz {
        forward::im2col(xd, b * cin * ih * iw, cin, ih, iw, k, stride, pad, oh, ow, &mut col);
        // transposed patches: row j holds every kernel tap of output position j
        for q in 0..taps {
            for j in 0..cols {
                col_t[j * taps + q] = col[q * cols + j];
            }
        }
        // dW[n][q] += sum_j dy[n][j] * col[q][j], accumulated j-major so the
        // inner update runs elementwise over q
        for n in 0..nf {
            let dy_row = &dyd[(b * nf + n) * cols..(b * nf + n + 1) * cols];
            let dw_row = &mut dwd[n * taps..(n + 1) * taps];
            for (j, &g) in dy_row.iter().enumerate() {
                let patch = &col_t[j * taps..(j + 1) * taps];
                for (dw, &cv) in dw_row.iter_mut().zip(patch) {
                    *dw += g * cv;
                }
            }
        }
        // dcol[q][j] = sum_n w[n][q] * dy[n][j], then scatter back to dx
        dcol.fill(0.0);
        for n in 0..nf {
            let dy_row = &dyd[(b * nf + n) * cols..(b * nf + n + 1) * cols];
            let w_row = &wd[n * taps..(n + 1) * taps];
            for (q, &wv) in w_row.iter().enumerate() {
                let dcol_row = &mut dcol[q * cols..(q + 1) * cols];
                for (dc, &g) in dcol_row.iter_mut().zip(dy_row) {
                    *dc += wv * g;
                }
            }
        }
        col2im_add(&dcol, b * cin * ih * iw, cin, ih, iw, k, stride, pad, oh, ow, dxd);
    }
    (dx, dw, db)
}

/// Scatter-add patch-row gradients back onto the input layout; padding taps
/// fall outside and are skipped. Inverse of `im2col`.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcol: &[f32],
    sample_base: usize,
    cin: usize,
    ih: usize,
    iw: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dxd: &mut [f32],
) {
    let cols = oh * ow;
    for c in 0..cin {
        let x_base = sample_base + c * ih * iw;
        for kh in 0..k {
            let (oh_lo, oh_hi) = forward::out_range(ih, oh, kh, stride, pad);
            for kw in 0..k {
                let (ow_lo, ow_hi) = forward::out_range(iw, ow, kw, stride, pad);
                if ow_lo >= ow_hi {
                    continue;
                }
                let q = (c * k + kh) * k + kw;
                let col_row = q * cols;
                for o_h in oh_lo..oh_hi {
                    let i_h = o_h * stride + kh - pad;
                    let x_row = x_base + i_h * iw;
                    let src = &dcol[col_row + o_h * ow + ow_lo..col_row + o_h * ow + ow_hi];
                    if stride == 1 {
                        let dst = &mut dxd[x_row + ow_lo + kw - pad..x_row + ow_hi + kw - pad];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for (&s, o_w) in src.iter().zip(ow_lo..ow_hi) {
                            dxd[x_row + o_w * stride + kw - pad] += s;
                        }
                    }
                }
            }
        }
    }
}

fn bn_backward(
    x: &TensorRec,
    gamma: &TensorRec,
    stats: &BnStats,
    dy: &TensorRec,
) -> (TensorRec, TensorRec, TensorRec) {
    let (bsz, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let hw = h * w;
    let m = (bsz * hw) as f32;
    let mut dx = TensorRec::zeros(x.shape());
    let mut dgamma = TensorRec::zeros(&[c]);
    let mut dbeta = TensorRec::zeros(&[c]);
    let xd = x.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for ch in 0..c {
        let mu = stats.mean[ch];
        let inv_std = 1.0 / (stats.var[ch] + BN_EPS).sqrt();
        let mut sum_dy = 0.0f32;
        let mut sum_dy_xhat = 0.0f32;
        for b in 0..bsz {
            let base = ((b * c) + ch) * hw;
            for i in base..base + hw {
                let xhat = (xd[i] - mu) * inv_std;
                sum_dy += dyd[i];
                sum_dy_xhat += dyd[i] * xhat;
            }
        }
        dbeta.data_mut()[ch] = sum_dy;
        dgamma.data_mut()[ch] = sum_dy_xhat;
        let g = gamma.data()[ch];
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for b in 0..bsz {
            let base = ((b * c) + ch) * hw;
            for i in base..base + hw {
                let xhat = (xd[i] - mu) * inv_std;
                dxd[i] = g * inv_std * (dyd[i] - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn maxpool_backward(x: &TensorRec, dy: &TensorRec, k: usize, stride: usize) -> TensorRec {
    let (bsz, c, ih, iw) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (dy.dim(2), dy.dim(3));
    let mut dx = TensorRec::zeros(x.shape());
    let xd = x.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for bc in 0..bsz * c {
        let x_base = bc * ih * iw;
        let dy_base = bc * oh * ow;
        for o_h in 0..oh {
            for o_w in 0..ow {
                // route to the first maximum, matching the forward tie rule
                let mut best_idx = 0usize;
                let mut best = f32::NEG_INFINITY;
                for kh in 0..k {
                    let row = x_base + (o_h * stride + kh) * iw + o_w * stride;
                    for kw in 0..k {
                        let v = xd[row + kw];
                        if v > best {
                            best = v;
                            best_idx = row + kw;
                        }
                    }
                }
                dxd[best_idx] += dyd[dy_base + o_h * ow + o_w];
            }
        }
    }
    dx
}

fn avgpool_backward(x: &TensorRec, dy: &TensorRec, k: usize, stride: usize) -> TensorRec {
    let (bsz, c, ih, iw) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (dy.dim(2), dy.dim(3));
    let inv = 1.0 / (k * k) as f32;
    let mut dx = TensorRec::zeros(x.shape());
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for bc in 0..bsz * c {
        let x_base = bc * ih * iw;
        let dy_base = bc * oh * ow;
        for o_h in 0..oh {
            for o_w in 0..ow {
                let g = dyd[dy_base + o_h * ow + o_w] * inv;
                for kh in 0..k {
                    let row = x_base + (o_h * stride + kh) * iw + o_w * stride;
                    for kw in 0..k {
                        dxd[row + kw] += g;
                    }
                }
            }
        }
    }
    dx
}

fn linear_backward(
    x: &TensorRec,
    weight: &TensorRec,
    has_bias: bool,
    dy: &TensorRec,
) -> (TensorRec, TensorRec, Option<TensorRec>) {
    let (bsz, nin) = (x.dim(0), x.dim(1));
    let nout = weight.dim(0);
    let mut dx = TensorRec::zeros(x.shape());
    let mut dw = TensorRec::zeros(weight.shape());
    let mut db = has_bias.then(|| TensorRec::zeros(&[nout]));
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for b in 0..bsz {
        let x_row = &xd[b * nin..(b + 1) * nin];
        for o in 0..nout {
            let g = dyd[b * nout + o];
            let w_row = &wd[o * nin..(o + 1) * nin];
            let dw_row = &mut dwd[o * nin..(o + 1) * nin];
            for i in 0..nin {
                dw_row[i] += g * x_row[i];
                dxd[b * nin + i] += g * w_row[i];
            }
            if let Some(db) = db.as_mut() {
                db.data_mut()[o] += g;
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::build_model;

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let logits = TensorRec::zeros(&[2, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - (4.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let logits = TensorRec::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn balanced_batch_at_uniform_logits_has_near_zero_gradient() {
        // Identical inputs, one label per class: the per-class softmax errors
        // cancel, so the total gradient vanishes at uniform logits.
        let text = "
input 1 4 4
init zero
conv c1 filters=2 kernel=3 pad=1 bias=false
flatten f
linear fc out=4 bias=false
";
        let m = build_model(text, 0).unwrap();
        let batch = TensorRec::from_vec(&[4, 1, 4, 4], vec![0.25; 64]).unwrap();
        let pass = backward(&m, &batch, &[0, 1, 2, 3]).unwrap();
        for grads in pass.grads.layers.iter().flatten() {
            let tensors: Vec<&TensorRec> = match grads {
                LayerGrads::Conv { weight, bias } => {
                    weight_bias(weight, bias)
                }
                LayerGrads::Linear { weight, bias } => weight_bias(weight, bias),
                LayerGrads::Bn { gamma, beta } => vec![gamma, beta],
            };
            for t in tensors {
                let norm: f32 = t.data().iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!(norm < 1e-6, "gradient norm {norm} should vanish");
            }
        }
    }

    fn weight_bias<'a>(w: &'a TensorRec, b: &'a Option<TensorRec>) -> Vec<&'a TensorRec> {
        let mut v = vec![w];
        if let Some(b) = b {
            v.push(b);
        }
        v
    }

    #[test]
    fn argmax_tie_takes_lowest_index() {
        let logits = TensorRec::from_vec(&[1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(count_correct(&logits, &[0]), 1);
        assert_eq!(count_correct(&logits, &[1]), 0);
    }
}
