//! Independent reference implementations for verification.
//!
//! Everything here exists to check the engine from the outside: a naive f64
//! re-implementation of the training-mode forward pass and loss (sharing no
//! kernel code with the engine), central finite differences against it, a
//! frozen-attractor finite-difference oracle for the gravity penalty, and a
//! Spearman rank correlation. Test suites drive these; nothing in the engine
//! calls back into this module.

use crate::backward::{GradMap, LayerGrads};
use crate::error::Result;
use crate::forward::BN_EPS;
use crate::graph::{LayerKind, LayerParams, ModelGraph, Src};
use crate::gravity;
use crate::tensor::TensorRec;

#[derive(Clone)]
struct RefVal {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RefVal {
    fn from_tensor(t: &TensorRec) -> Self {
        RefVal {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn zeros(shape: &[usize]) -> Self {
        RefVal {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }
}

/// Training-mode loss (batch-statistic batchnorm, mean cross-entropy) of the
/// model on one batch, evaluated entirely in f64 by naive loops.
pub fn reference_loss(model: &ModelGraph, batch: &TensorRec, labels: &[u32]) -> f64 {
    let mut values: Vec<RefVal> = Vec::with_capacity(model.layers().len());
    let input = RefVal::from_tensor(batch);
    for (id, layer) in model.layers().iter().enumerate() {
        let arg = |s: &Src| -> &RefVal {
            match s {
                Src::Input => &input,
                Src::Layer(p) => &values[*p],
            }
        };
        let x = arg(&layer.inputs[0]);
        let out = match &layer.kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => {
                let Some(LayerParams::Conv { weight, bias }) = model.params(id) else {
                    unreachable!()
                };
                conv_ref(x, weight, bias.as_ref(), *stride, *padding)
            }
            LayerKind::BatchNorm { .. } => {
                let Some(LayerParams::Bn { gamma, beta, .. }) = model.params(id) else {
                    unreachable!()
                };
                bn_ref(x, gamma, beta)
            }
            LayerKind::Relu => RefVal {
                shape: x.shape.clone(),
                data: x.data.iter().map(|&v| v.max(0.0)).collect(),
            },
            LayerKind::MaxPool { kernel, stride } => pool_ref(x, *kernel, *stride, true),
            LayerKind::AvgPool { kernel, stride } => pool_ref(x, *kernel, *stride, false),
            LayerKind::Linear { .. } => {
                let Some(LayerParams::Linear { weight, bias }) = model.params(id) else {
                    unreachable!()
                };
                linear_ref(x, weight, bias.as_ref())
            }
            LayerKind::Add => {
                let y = arg(&layer.inputs[1]);
                RefVal {
                    shape: x.shape.clone(),
                    data: x.data.iter().zip(&y.data).map(|(a, b)| a + b).collect(),
                }
            }
            LayerKind::Flatten => RefVal {
                shape: vec![x.dim(0), x.data.len() / x.dim(0)],
                data: x.data.clone(),
            },
        };
        values.push(out);
    }
    cross_entropy_ref(values.last().expect("non-empty"), labels)
}

fn conv_ref(
    x: &RefVal,
    weight: &TensorRec,
    bias: Option<&TensorRec>,
    stride: usize,
    pad: usize,
) -> RefVal {
    let (bsz, cin, ih, iw) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (nf, k) = (weight.dim(0), weight.dim(2));
    let oh = (ih + 2 * pad - k) / stride + 1;
    let ow = (iw + 2 * pad - k) / stride + 1;
    let mut y = RefVal::zeros(&[bsz, nf, oh, ow]);
    let wd = weight.data();
    for b in 0..bsz {
        for n in 0..nf {
            for o_h in 0..oh {
                for o_w in 0..ow {
                    let mut acc = bias.map(|t| t.data()[n] as f64).unwrap_or(0.0);
                    for c in 0..cin {
                        for kh in 0..k {
                            for kw in 0..k {
                                let i_h = (o_h * stride + kh) as isize - pad as isize;
                                let i_w = (o_w * stride + kw) as isize - pad as isize;
                                if i_h < 0 || i_w < 0 || i_h >= ih as isize || i_w >= iw as isize {
                                    continue;
                                }
                                let xi = ((b * cin + c) * ih + i_h as usize) * iw + i_w as usize;
                                let wi = ((n * cin + c) * k + kh) * k + kw;
                                acc += x.data[xi] * wd[wi] as f64;
                            }
                        }
                    }
                    y.data[((b * nf + n) * oh + o_h) * ow + o_w] = acc;
                }
            }
        }
    }
    y
}

fn bn_ref(x: &RefVal, gamma: &TensorRec, beta: &TensorRec) -> RefVal {
    let (bsz, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let hw = h * w;
    let m = (bsz * hw) as f64;
    let mut y = RefVal::zeros(&x.shape);
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..bsz {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                sum += x.data[i];
            }
        }
        let mu = sum / m;
        let mut sq = 0.0;
        for b in 0..bsz {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                sq += (x.data[i] - mu) * (x.data[i] - mu);
            }
        }
        let var = sq / m;
        let inv = 1.0 / (var + BN_EPS as f64).sqrt();
        let g = gamma.data()[ch] as f64;
        let bta = beta.data()[ch] as f64;
        for b in 0..bsz {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                y.data[i] = (x.data[i] - mu) * inv * g + bta;
            }
        }
    }
    y
}

fn pool_ref(x: &RefVal, k: usize, stride: usize, take_max: bool) -> RefVal {
    let (bsz, c, ih, iw) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let oh = (ih - k) / stride + 1;
    let ow = (iw - k) / stride + 1;
    let mut y = RefVal::zeros(&[bsz, c, oh, ow]);
    for bc in 0..bsz * c {
        for o_h in 0..oh {
            for o_w in 0..ow {
                let mut acc = if take_max { f64::NEG_INFINITY } else { 0.0 };
                for kh in 0..k {
                    for kw in 0..k {
                        let v = x.data[bc * ih * iw + (o_h * stride + kh) * iw + o_w * stride + kw];
                        if take_max {
                            acc = acc.max(v);
                        } else {
                            acc += v;
                        }
                    }
                }
                if !take_max {
                    acc /= (k * k) as f64;
                }
                y.data[bc * oh * ow + o_h * ow + o_w] = acc;
            }
        }
    }
    y
}

fn linear_ref(x: &RefVal, weight: &TensorRec, bias: Option<&TensorRec>) -> RefVal {
    let (bsz, nin) = (x.dim(0), x.dim(1));
    let nout = weight.dim(0);
    let mut y = RefVal::zeros(&[bsz, nout]);
    for b in 0..bsz {
        for o in 0..nout {
            let mut acc = bias.map(|t| t.data()[o] as f64).unwrap_or(0.0);
            for i in 0..nin {
                acc += x.data[b * nin + i] * weight.data()[o * nin + i] as f64;
            }
            y.data[b * nout + o] = acc;
        }
    }
    y
}

fn cross_entropy_ref(logits: &RefVal, labels: &[u32]) -> f64 {
    let (bsz, classes) = (logits.dim(0), logits.dim(1));
    let mut loss = 0.0;
    for b in 0..bsz {
        let row = &logits.data[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[labels[b] as usize];
    }
    loss / bsz as f64
}

/// Flattened engine gradients named like `named_tensors`, skipping
/// parameter-free layers (running statistics carry no gradient).
pub fn named_grads<'a>(model: &ModelGraph, grads: &'a GradMap) -> Vec<(String, &'a TensorRec)> {
    let mut out = Vec::new();
    for (id, layer) in model.layers().iter().enumerate() {
        let Some(g) = grads.layers[id].as_ref() else {
            continue;
        };
        match g {
            LayerGrads::Conv { weight, bias } | LayerGrads::Linear { weight, bias } => {
                out.push((format!("{}.weight", layer.name), weight));
                if let Some(b) = bias {
                    out.push((format!("{}.bias", layer.name), b));
                }
            }
            LayerGrads::Bn { gamma, beta } => {
                out.push((format!("{}.gamma", layer.name), gamma));
                out.push((format!("{}.beta", layer.name), beta));
            }
        }
    }
    out
}

/// Worst mismatch found by a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub entries: usize,
}

/// Central finite differences of the f64 reference loss against the engine's
/// backward pass, over every learnable parameter.
///
/// The relative error of an entry is `|fd - ad| / max(|fd|, |ad|, floor)`
/// with `floor = 1e-3 * max(|fd|)` over the tensor: entries three orders of
/// magnitude below their tensor's largest gradient are measured against that
/// floor instead of their own vanishing scale.
pub fn check_data_gradients(
    model: &ModelGraph,
    batch: &TensorRec,
    labels: &[u32],
    h: f32,
) -> Result<GradCheckReport> {
    let pass = crate::backward::backward(model, batch, labels)?;
    let engine = named_grads(model, &pass.grads);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        entries: 0,
    };

    for (name, grad) in engine {
        let base = lookup(model, &name);
        let n = base.len();
        let mut fd = vec![0.0f64; n];
        let mut work = model.clone();
        for (i, slot) in fd.iter_mut().enumerate() {
            let orig = base.data()[i];
            let wp = orig + h;
            let wm = orig - h;

            let mut plus = base.clone();
            plus.data_mut()[i] = wp;
            work.set_named_tensor(&name, plus)?;
            let lp = reference_loss(&work, batch, labels);

            let mut minus = base.clone();
            minus.data_mut()[i] = wm;
            work.set_named_tensor(&name, minus)?;
            let lm = reference_loss(&work, batch, labels);

            work.set_named_tensor(&name, base.clone())?;
            *slot = (lp - lm) / (wp as f64 - wm as f64);
        }
        let floor = 1e-3 * fd.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-9);
        for (i, &fd_i) in fd.iter().enumerate() {
            let ad = grad.data()[i] as f64;
            let err = (fd_i - ad).abs() / fd_i.abs().max(ad.abs()).max(floor);
            report.entries += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_tensor = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn lookup(model: &ModelGraph, name: &str) -> TensorRec {
    model
        .named_tensors()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .expect("gradient names mirror tensor names")
}

/// Gravity penalty of one layer with the attractor index and attractor mass
/// frozen: `alpha * G * m1 * sum_{n != p1} m_n(W) * (p1 - p_n)^2`, in f64.
pub fn penalty_value_frozen(
    weight: &TensorRec,
    attractor: usize,
    m1: f64,
    alpha: f64,
    g: f64,
) -> f64 {
    let mut total = 0.0;
    for n in 0..weight.dim(0) {
        if n == attractor {
            continue;
        }
        let mass = gravity::filter_mass(weight.slab(n));
        let sep = attractor.abs_diff(n) as f64;
        total += mass * sep * sep;
    }
    alpha * g * m1 * total
}

/// Central finite differences of the frozen penalty with respect to every
/// weight entry. The step never crosses zero (h = |w| / 2 for nonzero
/// entries), where the L1 mass has its kink.
pub fn fd_penalty_gradient(
    weight: &TensorRec,
    attractor: usize,
    alpha: f64,
    g: f64,
) -> Vec<f64> {
    let m1 = gravity::filter_mass(weight.slab(attractor));
    let mut out = vec![0.0f64; weight.len()];
    let mut work = weight.clone();
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = weight.data()[i];
        let h = if orig == 0.0 { 1e-4 } else { (orig.abs() * 0.5).max(1e-7) };
        let wp = orig + h;
        let wm = orig - h;
        work.data_mut()[i] = wp;
        let pp = penalty_value_frozen(&work, attractor, m1, alpha, g);
        work.data_mut()[i] = wm;
        let pm = penalty_value_frozen(&work, attractor, m1, alpha, g);
        work.data_mut()[i] = orig;
        *slot = (pp - pm) / (wp as f64 - wm as f64);
    }
    out
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples required");
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
