//! Behavioural laws of the gravity regularizer: finite-difference agreement
//! of the penalty gradient, exact shrinkage under a zero data gradient, sign
//! preservation, force monotonicity and linearity, and the mass/distance
//! anti-correlation that gravity training is supposed to produce.

use gprune_core::backward::{GradMap, LayerGrads};
use gprune_core::check;
use gprune_core::data::Dataset;
use gprune_core::descriptor::build_model;
use gprune_core::graph::LayerParams;
use gprune_core::gravity::{
    self, layer_state, AttractorMode, GravityConfig, DEFAULT_G,
};
use gprune_core::optim;
use gprune_core::tensor::TensorRec;
use gprune_core::train::{train, TrainOptions};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_weight(n: usize, c: usize, k: usize, seed: u64) -> TensorRec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TensorRec::from_vec(
        &[n, c, k, k],
        (0..n * c * k * k).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
    )
    .unwrap()
}

#[test]
fn penalty_gradient_matches_finite_differences() {
    // randomized layer sizes, frozen attractor and attractor mass in the oracle
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let n = rng.random_range(2..=16);
        let c = rng.random_range(1..=8);
        let weight = random_weight(n, c, 3, 1000 + trial);
        let alpha = 10f64.powi(rng.random_range(1..=5));
        let state = layer_state(&weight, AttractorMode::MaxMass, DEFAULT_G, None).unwrap();
        let engine =
            gravity::penalty_gradient_from_state(&weight, &state, alpha, DEFAULT_G);
        let fd = check::fd_penalty_gradient(&weight, state.attractor_index, alpha, DEFAULT_G);
        for (i, (&e, &f)) in engine.data().iter().zip(&fd).enumerate() {
            let denom = (e as f64).abs().max(f.abs());
            if denom == 0.0 {
                assert_eq!(e, 0.0);
                continue;
            }
            let rel = ((e as f64) - f).abs() / denom;
            worst = worst.max(rel);
            assert!(rel < 1e-4, "trial {trial} entry {i}: engine {e} fd {f}");
        }
    }
    assert!(worst > 0.0, "oracle exercised nonzero gradients");
}

#[test]
fn attractor_block_gradient_is_exactly_zero() {
    for seed in 0..5 {
        let weight = random_weight(8, 4, 3, seed);
        let state = layer_state(&weight, AttractorMode::MaxMass, DEFAULT_G, None).unwrap();
        let grad = gravity::penalty_gradient_from_state(&weight, &state, 1e4, DEFAULT_G);
        assert!(grad.slab(state.attractor_index).iter().all(|&v| v == 0.0));
        assert_eq!(state.forces[state.attractor_index], 0.0);
    }
}

/// One regularized step with the data gradient forced to zero shrinks every
/// non-attractor weight by exactly eps*alpha*G*m1*(p1-pn)^2*sign(w); the
/// comparison is against the f64 closed form, relative to the weight value.
#[test]
fn shrinkage_law_is_exact() {
    let text = "
input 2 6 6
conv c1 filters=4 kernel=3 pad=1 bias=false
relu r1
conv c2 filters=8 kernel=3 pad=1 bias=false
relu r2
flatten f
linear fc out=3
";
    let mut model = build_model(text, 5).unwrap();
    // weights bounded away from zero so the relative comparison is stable
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for id in model.conv_ids() {
        if let Some(LayerParams::Conv { weight, .. }) = model.params_mut(id) {
            for v in weight.data_mut() {
                let mag = rng.random_range(0.05f32..0.5);
                let sgn = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                *v = mag * sgn;
            }
        }
    }
    let before = model.clone();
    let c2 = model.layer_id("c2").unwrap();
    let cfg = GravityConfig {
        g: DEFAULT_G,
        alpha_g: 1e6,
        attractor_mode: AttractorMode::MaxMass,
        prune_layers: vec![c2],
        recompute_attractor: true,
    };
    let eps = 0.1f32;

    let state = layer_state(before.conv_weight(c2).unwrap(), cfg.attractor_mode, cfg.g, None)
        .unwrap();
    let mut grads = GradMap::zeros_like(&model);
    gravity::add_penalty_gradients(&model, &mut grads, &cfg, None).unwrap();
    optim::sgd_step(&mut model, &grads, eps).unwrap();

    let w_before = before.conv_weight(c2).unwrap();
    let w_after = model.conv_weight(c2).unwrap();
    let m1 = state.masses[state.attractor_index];
    for n in 0..w_before.dim(0) {
        let old = w_before.slab(n);
        let new = w_after.slab(n);
        if n == state.attractor_index {
            assert_eq!(old, new, "attractor weights must not move");
            continue;
        }
        let sep = state.attractor_index.abs_diff(n) as f64;
        let delta = eps as f64 * cfg.alpha_g * cfg.g * m1 * sep * sep;
        for (i, (&o, &w)) in old.iter().zip(new).enumerate() {
            let expect = o as f64 - delta * (o as f64).signum();
            let rel = ((w as f64) - expect).abs() / expect.abs();
            assert!(
                rel < 1e-7,
                "filter {n} entry {i}: got {w}, want {expect} (rel {rel:.2e})"
            );
        }
    }

    // untouched layers are bit-identical
    let c1 = model.layer_id("c1").unwrap();
    assert_eq!(before.conv_weight(c1).unwrap(), model.conv_weight(c1).unwrap());
}

/// A pure-penalty step smaller than any weight magnitude never flips a sign.
#[test]
fn sign_law_pure_penalty_descent() {
    for seed in 0..10u64 {
        let text = "
input 1 4 4
conv c1 filters=6 kernel=3 pad=1 bias=false
relu r
flatten f
linear fc out=2
";
        let mut model = build_model(text, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let c1 = model.layer_id("c1").unwrap();
        if let Some(LayerParams::Conv { weight, .. }) = model.params_mut(c1) {
            for v in weight.data_mut() {
                let mag = rng.random_range(0.1f32..1.0);
                *v = if rng.random_bool(0.5) { mag } else { -mag };
            }
        }
        let before = model.conv_weight(c1).unwrap().clone();
        let cfg = GravityConfig::new(1e5, vec![c1]);
        let mut grads = GradMap::zeros_like(&model);
        let states = gravity::add_penalty_gradients(&model, &mut grads, &cfg, None).unwrap();
        // the largest step magnitude stays below the smallest weight
        let max_step: f32 = match grads.layers[c1].as_ref().unwrap() {
            LayerGrads::Conv { weight, .. } => {
                weight.data().iter().fold(0.0f32, |a, v| a.max(v.abs()))
            }
            _ => unreachable!(),
        };
        assert!(max_step * 0.05 < 0.1, "step too large for the sign law");
        optim::sgd_step(&mut model, &grads, 0.05).unwrap();
        let after = model.conv_weight(c1).unwrap();
        for (o, n) in before.data().iter().zip(after.data()) {
            assert!(o.signum() == n.signum(), "sign flipped: {o} -> {n}");
        }
        assert_eq!(states.len(), 1);
    }
}

#[test]
fn force_is_strictly_monotone_in_separation_for_fixed_masses() {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let n = rng.random_range(3..=24);
        // constant-magnitude rows give equal masses; force must then rise
        // strictly with separation
        let mag = rng.random_range(0.1f32..1.0);
        let mut weight = TensorRec::zeros(&[n, 2, 3, 3]);
        for f in 0..n {
            weight.slab_mut(f).fill(if f % 2 == 0 { mag } else { -mag });
        }
        let state = layer_state(&weight, AttractorMode::IndexZero, DEFAULT_G, None).unwrap();
        for sep in 2..n {
            assert!(
                state.forces[sep] > state.forces[sep - 1],
                "force must strictly increase with |p1-pn|"
            );
        }
    }
}

/// Scaling a non-attractor filter's weights by c > 0 scales its force by c.
#[test]
fn force_is_linear_in_filter_mass() {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(60 + seed);
        let n = rng.random_range(3..=12);
        let weight = random_weight(n, 3, 3, 200 + seed);
        let state = layer_state(&weight, AttractorMode::MaxMass, DEFAULT_G, None).unwrap();
        let pick = (state.attractor_index + 1) % n;
        let c = rng.random_range(0.2f32..4.0);
        let mut scaled = weight.clone();
        for v in scaled.slab_mut(pick) {
            *v *= c;
        }
        // keep the attractor choice stable under the scaling
        let rescaled_state =
            layer_state(&scaled, AttractorMode::MaxMass, DEFAULT_G, Some(state.attractor_index))
                .unwrap();
        let ratio = rescaled_state.forces[pick] / state.forces[pick];
        assert!(
            (ratio - c as f64).abs() < 1e-3 * c as f64,
            "force ratio {ratio} vs scale {c}"
        );
    }
}

/// Training a toy net under strong gravity leaves far filters lighter:
/// final mass anti-correlates with index distance from the attractor.
#[test]
fn gravity_training_orders_masses_by_distance() {
    let text = "
input 2 8 8
conv c1 filters=8 kernel=3 pad=1 bias=false
relu r1
maxpool p1 kernel=2
conv c2 filters=16 kernel=3 pad=1 bias=false
relu r2
avgpool gap kernel=global
flatten f
linear fc out=3
";
    let mut model = build_model(text, 71).unwrap();

    // small synthetic three-class blob set
    let mut rng = ChaCha8Rng::seed_from_u64(5000);
    let n_samples = 240;
    let mut data = Vec::with_capacity(n_samples * 2 * 64);
    let mut labels = Vec::with_capacity(n_samples);
    let templates: Vec<Vec<f32>> = (0..3)
        .map(|_| (0..2 * 64).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    for i in 0..n_samples {
        let class = i % 3;
        labels.push(class as u32);
        for &t in &templates[class] {
            data.push(t + rng.random_range(-0.4f32..0.4));
        }
    }
    let dataset = Dataset::new(
        TensorRec::from_vec(&[n_samples, 2, 8, 8], data).unwrap(),
        labels,
        3,
    )
    .unwrap();

    let c2 = model.layer_id("c2").unwrap();
    let mut opts = TrainOptions::new(25, 32, 0.05);
    opts.gravity = Some(GravityConfig::new(5e5, vec![c2]));
    opts.seed = 13;
    let logs = train(&mut model, &dataset, &opts).unwrap();

    let last = logs.last().unwrap();
    let (_, state) = last
        .states
        .iter()
        .find(|(id, _)| *id == c2)
        .expect("state logged for the prunable layer");
    let mut masses = Vec::new();
    let mut separations = Vec::new();
    for (n, &m) in state.masses.iter().enumerate() {
        if n == state.attractor_index {
            continue;
        }
        masses.push(m);
        separations.push(state.attractor_index.abs_diff(n) as f64);
    }
    let rho = check::spearman(&masses, &separations);
    assert!(
        rho < -0.3,
        "mass should fall with distance from the attractor, got rho = {rho:.3}"
    );
}

#[test]
fn training_rejects_zero_epochs() {
    let text = "input 1 4 4\nconv c filters=2 kernel=3 pad=1\nflatten f\nlinear fc out=2\n";
    let mut model = build_model(text, 1).unwrap();
    let ds = Dataset::new(TensorRec::zeros(&[8, 1, 4, 4]), vec![0; 8], 2).unwrap();
    let opts = TrainOptions::new(0, 4, 0.1);
    assert!(train(&mut model, &ds, &opts).is_err());
}
