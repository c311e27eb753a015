//! Acceptance suite: the eight checks that gate a release, one test per
//! criterion, each printing a PASS/FAIL line with its runtime.
//!
//! Run with `cargo test -p gprune-cli --test acceptance -- --nocapture`.

mod common;

use gprune_cli::commands::{prune, sweep, train};
use gprune_core::backward::GradMap;
use gprune_core::check;
use gprune_core::descriptor::build_model;
use gprune_core::graph::LayerParams;
use gprune_core::gravity::{self, layer_state, AttractorMode, GravityConfig, DEFAULT_G};
use gprune_core::tensor::TensorRec;
use gprune_core::{cost, forward::forward, optim, pruning};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

fn criterion(number: u8, name: &str, body: impl FnOnce()) {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body));
    let secs = started.elapsed().as_secs_f64();
    match result {
        Ok(()) => println!("ACCEPTANCE {number} ({name}): PASS [{secs:.1}s]"),
        Err(e) => {
            println!("ACCEPTANCE {number} ({name}): FAIL [{secs:.1}s]");
            std::panic::resume_unwind(e);
        }
    }
}

fn repo_path(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn load_descriptor(name: &str, seed: u64) -> gprune_core::ModelGraph {
    let text = std::fs::read_to_string(repo_path("descriptors").join(name)).unwrap();
    build_model(&text, seed).unwrap()
}

fn random_batch(shape: &[usize], seed: u64) -> TensorRec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TensorRec::from_vec(
        shape,
        (0..shape.iter().product())
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect(),
    )
    .unwrap()
}

/// Criterion 1: the shipped ResNet-56 and VGG-19 descriptors reproduce the
/// reference speedup/compression grid within five percent at every rate.
#[test]
fn criterion_1_cost_ratio_grid() {
    criterion(1, "analytic speedup/compression grid", || {
        let cases: [(&str, [f64; 5], [f64; 5]); 2] = [
            (
                "resnet56.net",
                [1.14, 1.29, 1.45, 1.71, 1.99],
                [1.13, 1.26, 1.45, 1.69, 2.00],
            ),
            (
                "vgg19.net",
                [1.23, 1.53, 1.97, 2.61, 3.61],
                [1.24, 1.57, 2.04, 2.78, 3.98],
            ),
        ];
        for (file, speedups, compressions) in cases {
            let model = load_descriptor(file, 1);
            let base = cost::cost_model(&model).unwrap();
            let set = model.default_prune_set();
            for (i, rate) in [0.1, 0.2, 0.3, 0.4, 0.5].iter().enumerate() {
                let plan = pruning::make_pruning_plan(&model, *rate, &set).unwrap();
                let pruned = pruning::apply_plan(&model, &plan).unwrap();
                let report = cost::cost_model(&pruned).unwrap();
                let (s, c) = cost::speedup_compression(&base, &report).unwrap();
                assert!(
                    (s - speedups[i]).abs() / speedups[i] < 0.05,
                    "{file} speedup at {rate}: {s:.3} vs {:.2}",
                    speedups[i]
                );
                assert!(
                    (c - compressions[i]).abs() / compressions[i] < 0.05,
                    "{file} compression at {rate}: {c:.3} vs {:.2}",
                    compressions[i]
                );
            }
        }
    });
}

/// Criterion 2: the penalty gradient matches central finite differences of
/// the frozen-attractor penalty on fifty randomized layers, rel < 1e-4.
#[test]
fn criterion_2_penalty_gradient_finite_differences() {
    criterion(2, "penalty gradient vs finite differences", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut max_rel = 0.0f64;
        for trial in 0..50 {
            let n = rng.random_range(2..=16);
            let c = rng.random_range(1..=8);
            let alpha = 10f64.powi(rng.random_range(1..=5));
            let mut seed_rng = ChaCha8Rng::seed_from_u64(9000 + trial);
            let weight = TensorRec::from_vec(
                &[n, c, 3, 3],
                (0..n * c * 9).map(|_| seed_rng.random_range(-0.5f32..0.5)).collect(),
            )
            .unwrap();
            let state = layer_state(&weight, AttractorMode::MaxMass, DEFAULT_G, None).unwrap();
            let engine = gravity::penalty_gradient_from_state(&weight, &state, alpha, DEFAULT_G);
            let fd = check::fd_penalty_gradient(&weight, state.attractor_index, alpha, DEFAULT_G);
            for (&e, &f) in engine.data().iter().zip(&fd) {
                let denom = (e as f64).abs().max(f.abs());
                if denom == 0.0 {
                    assert_eq!(e, 0.0);
                    continue;
                }
                max_rel = max_rel.max(((e as f64) - f).abs() / denom);
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel:.3e}");
    });
}

/// Criterion 3: with the data gradient zeroed, one regularized step shrinks
/// every non-attractor weight by exactly eps*alpha*G*m1*(p1-pn)^2*sign(w)
/// (1e-7 relative against the f64 closed form); attractor weights do not
/// move at all.
#[test]
fn criterion_3_shrinkage_law() {
    criterion(3, "exact shrinkage under zero data gradient", || {
        let mut model = load_descriptor("toy.net", 33);
        // keep weights away from zero so relative comparisons are stable
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for id in model.conv_ids() {
            if let Some(LayerParams::Conv { weight, .. }) = model.params_mut(id) {
                for v in weight.data_mut() {
                    let mag = rng.random_range(0.05f32..0.5);
                    *v = if rng.random_bool(0.5) { mag } else { -mag };
                }
            }
        }
        let set = model.default_prune_set();
        assert!(!set.is_empty());
        // keep the largest shrink two orders below the smallest weight:
        // near the crossover w - delta cancels and no finite precision can
        // measure the change to 1e-7
        let cfg = GravityConfig::new(2e3, set.clone());
        let eps = 0.1f32;
        let before = model.clone();
        let states: Vec<_> = set
            .iter()
            .map(|&id| {
                layer_state(before.conv_weight(id).unwrap(), cfg.attractor_mode, cfg.g, None)
                    .unwrap()
            })
            .collect();

        let mut grads = GradMap::zeros_like(&model);
        gravity::add_penalty_gradients(&model, &mut grads, &cfg, None).unwrap();
        optim::sgd_step(&mut model, &grads, eps).unwrap();

        for (&id, state) in set.iter().zip(&states) {
            let old = before.conv_weight(id).unwrap();
            let new = model.conv_weight(id).unwrap();
            let m1 = state.masses[state.attractor_index];
            for n in 0..old.dim(0) {
                if n == state.attractor_index {
                    assert_eq!(old.slab(n), new.slab(n), "attractor moved in layer {id}");
                    continue;
                }
                let sep = state.attractor_index.abs_diff(n) as f64;
                let delta = eps as f64 * cfg.alpha_g * cfg.g * m1 * sep * sep;
                for (&o, &w) in old.slab(n).iter().zip(new.slab(n)) {
                    let expect = o as f64 - delta * (o as f64).signum();
                    let rel = ((w as f64) - expect).abs() / expect.abs();
                    assert!(rel < 1e-7, "layer {id} filter {n}: rel {rel:.2e}");
                }
            }
        }
    });
}

/// Criterion 4: surgery equivalence: for twenty random plans on the toy net
/// and twenty on ResNet-56, pruned-model logits match the zero-masked
/// original within 1e-5 on a batch of 64 random inputs.
#[test]
fn criterion_4_surgery_equivalence() {
    criterion(4, "surgery equals zero-masking", || {
        for file in ["toy.net", "resnet56.net"] {
            let diffs: Vec<f32> = (0..20u64)
                .collect::<Vec<_>>()
                .par_iter()
                .map(|&trial| {
                    let model = load_descriptor(file, 300 + trial);
                    let mut rng = ChaCha8Rng::seed_from_u64(400 + trial);
                    let rate = rng.random_range(0.05f64..0.7);
                    let set = model.default_prune_set();
                    let plan = pruning::make_pruning_plan(&model, rate, &set).unwrap();
                    let pruned = pruning::apply_plan(&model, &plan).unwrap();
                    let masked = pruning::mask_filters(&model, &plan).unwrap();
                    let (c, h, w) = model.input_shape;
                    let batch = random_batch(&[64, c, h, w], 500 + trial);
                    let a = forward(&pruned, &batch).unwrap();
                    let b = forward(&masked, &batch).unwrap();
                    a.data()
                        .iter()
                        .zip(b.data())
                        .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
                })
                .collect();
            let worst = diffs.iter().cloned().fold(0.0f32, f32::max);
            assert!(worst <= 1e-5, "{file}: worst logit difference {worst}");
        }
    });
}

/// Criterion 5: data-gradient correctness for every layer kind against
/// central finite differences of the f64 reference loss, rel < 1e-3.
#[test]
fn criterion_5_data_gradients() {
    criterion(5, "layer-kind gradient checks", || {
        // (descriptor, classes, bias lift); a positive conv bias keeps
        // relu/maxpool checks away from their kinks
        type GradCase = (&'static str, u32, Option<(&'static str, f32)>);
        let nets: [GradCase; 7] = [
            (
                "input 2 7 7\nconv c1 filters=4 kernel=3 stride=2 pad=1\nrelu r1\nflatten f\nlinear fc out=3\n",
                3,
                None,
            ),
            (
                "input 3 6 6\nconv c1 filters=5 kernel=3 bias=false\nrelu r1\nflatten f\nlinear fc out=4\n",
                4,
                None,
            ),
            (
                "input 2 6 6\nconv c1 filters=4 kernel=3 pad=1 bias=false\nbn b1\nconv c2 filters=3 kernel=3 pad=1\nflatten f\nlinear fc out=3\n",
                3,
                None,
            ),
            (
                "input 2 8 8\nconv c1 filters=4 kernel=3 pad=1\nrelu r1\nmaxpool p kernel=2\nconv c2 filters=3 kernel=3 pad=1 bias=false\nflatten f\nlinear fc out=3\n",
                3,
                Some(("c1", 3.0)),
            ),
            (
                "input 2 8 8\nconv c1 filters=4 kernel=3 pad=1\nrelu r1\navgpool p kernel=2\nconv c2 filters=6 kernel=3 pad=1\navgpool gap kernel=global\nflatten f\nlinear fc out=3\n",
                3,
                Some(("c1", 3.0)),
            ),
            (
                "input 2 6 6\nconv c1 filters=4 kernel=3 pad=1\nconv c2 filters=4 kernel=3 pad=1 bias=false\nadd j from=c1,c2\navgpool gap kernel=global\nflatten f\nlinear fc out=3\n",
                3,
                None,
            ),
            (
                "input 2 4 4\nflatten f\nlinear l1 out=8\nrelu r\nlinear fc out=3\n",
                3,
                None,
            ),
        ];
        for (i, (text, classes, lift)) in nets.iter().enumerate() {
            let seed = 600 + i as u64;
            let mut model = build_model(text, seed).unwrap();
            if let Some((layer, value)) = lift {
                let id = model.layer_id(layer).unwrap();
                if let Some(LayerParams::Conv { bias: Some(b), .. }) = model.params_mut(id) {
                    b.data_mut().fill(*value);
                }
            }
            let (c, h, w) = model.input_shape;
            let batch = random_batch(&[3, c, h, w], seed + 50);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 90);
            let labels: Vec<u32> = (0..3).map(|_| rng.random_range(0..*classes)).collect();
            let report = check::check_data_gradients(&model, &batch, &labels, 1e-4).unwrap();
            assert!(
                report.max_rel_err < 1e-3,
                "net {i}: max rel {:.3e} at {}[{}]",
                report.max_rel_err,
                report.worst_tensor,
                report.worst_index
            );
        }
    });
}

/// Criterion 6: the desk-scale pruning-ratio sweep. The best nonzero gravity
/// rate dominates the gravity-free curve at rates 0.3..0.5 (median over the
/// three configured seeds), and masses in its gravity-trained prunable
/// layers anti-correlate with attractor distance (median Spearman < -0.3).
#[test]
fn criterion_6_sweep_dominance_and_mass_ordering() {
    criterion(6, "sweep dominance and mass ordering", || {
        let dir = tempfile::tempdir().unwrap();
        let config_path = repo_path("configs/toy.toml");
        let loaded =
            gprune_cli::load_config(&config_path, &gprune_cli::Overrides::default()).unwrap();
        let outcome = sweep::run(&loaded, Some(dir.path())).unwrap();
        let sweep_cfg = loaded.config.sweep.as_ref().unwrap();
        let seeds = sweep_cfg.seeds.len().max(1);
        assert_eq!(
            outcome.rows.len(),
            sweep_cfg.alpha_g.len() * sweep_cfg.rates.len() * seeds
        );

        let median_acc = |alpha: f64, rate: f64| -> f64 {
            let mut accs: Vec<f64> = outcome
                .rows
                .iter()
                .filter(|r| r.alpha_g == alpha && r.rate == rate)
                .map(|r| r.accuracy)
                .collect();
            assert!(!accs.is_empty());
            sweep::median(&mut accs)
        };

        // the best nonzero rate by summed median accuracy at 0.3/0.4/0.5;
        // ties go to the stronger regularizer, which prunes further
        let check_rates = [0.3, 0.4, 0.5];
        let mut best = (f64::NEG_INFINITY, 0.0f64);
        for &alpha in sweep_cfg.alpha_g.iter().filter(|&&a| a > 0.0) {
            let score: f64 = check_rates.iter().map(|&r| median_acc(alpha, r)).sum();
            if score >= best.0 {
                best = (score, alpha);
            }
        }
        let best_alpha = best.1;
        println!("best nonzero alpha_g: {best_alpha} (summed median {:.1})", best.0);
        for &rate in &check_rates {
            let with = median_acc(best_alpha, rate);
            let without = median_acc(0.0, rate);
            println!("  p_r {rate}: gravity {with:.2}% vs baseline {without:.2}%");
            assert!(
                with >= without,
                "gravity curve must dominate at {rate}: {with:.2} < {without:.2}"
            );
        }

        let mut rhos: Vec<f64> = outcome
            .correlations
            .iter()
            .filter(|c| c.alpha_g == best_alpha)
            .map(|c| c.spearman)
            .collect();
        assert!(!rhos.is_empty(), "sweep must record mass correlations");
        let med = sweep::median(&mut rhos);
        println!("  mass/distance spearman median {med:.3} over {} layer-seeds", rhos.len());
        assert!(med < -0.3, "median spearman {med:.3} must be below -0.3");
    });
}

/// Criterion 7: pruning one frozen gravity-trained checkpoint at all five
/// rates runs zero optimizer steps and yields five working models.
#[test]
fn criterion_7_no_retraining() {
    criterion(7, "pruning runs no optimizer steps", || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = common::write_tiny_config(
            dir.path(),
            "run.toml",
            77,
            3,
            "[gravity]\nalpha_g = 1e4\n\n[pruning]\nrates = [0.1, 0.2, 0.3, 0.4, 0.5]\n",
        );
        let loaded = common::load(&cfg);
        let train_out = dir.path().join("t");
        std::fs::create_dir_all(&train_out).unwrap();
        let trained = train::run(&loaded, Some(&train_out)).unwrap();
        assert!(trained.optimizer_steps > 0);

        let prune_out = dir.path().join("p");
        std::fs::create_dir_all(&prune_out).unwrap();
        let outcome = prune::run(&loaded, &trained.checkpoint, Some(&prune_out)).unwrap();
        assert_eq!(
            outcome.optimizer_steps_delta, 0,
            "pruning must not take optimizer steps"
        );
        assert_eq!(outcome.pruned.len(), 5);
        let batch = random_batch(&[4, 2, 8, 8], 78);
        for p in &outcome.pruned {
            let (model, _) = gprune_core::load_checkpoint(&p.checkpoint).unwrap();
            assert_eq!(model.opt_steps, 0, "loaded models start with a fresh counter");
            let logits = forward(&model, &batch).unwrap();
            assert_eq!(logits.shape(), &[4, 3]);
        }
    });
}

/// Criterion 8: bit-identical checkpoints from two identical cmd-train runs
/// of the installed binary, verified through the CRC-checked loader.
#[test]
fn criterion_8_training_determinism() {
    criterion(8, "bit-identical retraining", || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = common::write_tiny_config(
            dir.path(),
            "run.toml",
            88,
            3,
            "[gravity]\nalpha_g = 1e4\n",
        );
        let run = |out: &str| {
            let out_dir = dir.path().join(out);
            let status = std::process::Command::new(env!("CARGO_BIN_EXE_gprune"))
                .args(["train", "--config"])
                .arg(&cfg)
                .arg("--out-dir")
                .arg(&out_dir)
                .status()
                .unwrap();
            assert!(status.success());
            out_dir.join("checkpoint.gprn")
        };
        let a = run("a");
        let b = run("b");
        let bytes_a = std::fs::read(&a).unwrap();
        let bytes_b = std::fs::read(&b).unwrap();
        assert_eq!(bytes_a, bytes_b, "checkpoints must match byte for byte");
        // the loader verifies the trailing CRC32 over all payload bytes
        let (ma, meta_a) = gprune_core::load_checkpoint(&a).unwrap();
        let (mb, meta_b) = gprune_core::load_checkpoint(&b).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(meta_a, meta_b);
        assert_eq!(meta_a.seed, 88);
    });
}
