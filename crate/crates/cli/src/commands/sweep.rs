//! `gprune sweep`: the (gravity rate x pruning rate) accuracy matrix.
//!
//! One training run per (alpha_g, seed) cell; each trained model is then
//! pruned at every rate from its frozen weights and evaluated without any
//! fine-tuning. Cells are independent, so they run in parallel; rows are
//! appended to the CSV as they finish (a partial file survives an abort) and
//! rewritten in deterministic order at the end.

use crate::config::LoadedConfig;
use crate::errors::{CliError, Result};
use crate::{commands, dataset, reports};
use gprune_core::{cost, pruning, GravityConfig};
use rayon::prelude::*;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha_g: f64,
    pub rate: f64,
    pub seed: u64,
    /// Pruned top-1 test accuracy in percent, before any fine-tuning.
    pub accuracy: f64,
    pub speedup: f64,
    pub compression: f64,
    pub train_secs: f64,
    pub prune_secs: f64,
}

/// Final mass/distance rank correlation of one prunable layer after a
/// gravity-trained cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MassCorrelation {
    pub alpha_g: f64,
    pub seed: u64,
    pub layer: String,
    pub spearman: f64,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub correlations: Vec<MassCorrelation>,
    pub csv: PathBuf,
}

const HEADER: &str = "alpha_g,rate,seed,accuracy,speedup,compression,train_secs,prune_secs";

fn format_row(r: &SweepRow) -> String {
    format!(
        "{},{},{},{:.2},{:.4},{:.4},{:.3},{:.3}",
        r.alpha_g, r.rate, r.seed, r.accuracy, r.speedup, r.compression, r.train_secs, r.prune_secs
    )
}

pub fn run(loaded: &LoadedConfig, out_flag: Option<&Path>) -> Result<SweepOutcome> {
    let out = commands::resolve_out_dir(loaded, out_flag)?;
    let Some(sweep) = &loaded.config.sweep else {
        return Err(CliError::Config("config has no [sweep] section".into()));
    };
    let seeds = if sweep.seeds.is_empty() {
        vec![loaded.config.seed]
    } else {
        sweep.seeds.clone()
    };

    let csv_path = out.join("sweep.csv");
    let incremental = Mutex::new({
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "{HEADER}")?;
        f
    });

    let mut cells: Vec<(f64, u64)> = Vec::new();
    for &alpha in &sweep.alpha_g {
        for &seed in &seeds {
            cells.push((alpha, seed));
        }
    }

    let results: Vec<Result<(Vec<SweepRow>, Vec<MassCorrelation>)>> = cells
        .par_iter()
        .map(|&(alpha, seed)| {
            let cell = run_cell(loaded, alpha, seed, &sweep.rates)?;
            let mut f = incremental.lock().expect("csv writer lock");
            for row in &cell.0 {
                writeln!(f, "{}", format_row(row)).map_err(CliError::Io)?;
            }
            f.flush().map_err(CliError::Io)?;
            Ok(cell)
        })
        .collect();

    let mut rows: Vec<SweepRow> = Vec::new();
    let mut correlations: Vec<MassCorrelation> = Vec::new();
    for r in results {
        let (cell_rows, cell_corr) = r?;
        rows.extend(cell_rows);
        correlations.extend(cell_corr);
    }
    correlations.sort_by(|a, b| {
        (a.alpha_g, a.seed, &a.layer)
            .partial_cmp(&(b.alpha_g, b.seed, &b.layer))
            .expect("finite keys")
    });
    rows.sort_by(|a, b| {
        (a.alpha_g, a.rate, a.seed)
            .partial_cmp(&(b.alpha_g, b.rate, b.seed))
            .expect("finite keys")
    });

    // deterministic final file
    {
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "{HEADER}")?;
        for row in &rows {
            writeln!(f, "{}", format_row(row))?;
        }
    }

    write_curves(&out, sweep.alpha_g.as_slice(), &sweep.rates, &rows)?;

    // per-layer mass/distance correlations of the gravity-trained cells
    {
        let mut f = std::fs::File::create(out.join("mass_correlation.csv"))?;
        writeln!(f, "alpha_g,seed,layer,spearman")?;
        for c in &correlations {
            writeln!(f, "{},{},{},{:.4}", c.alpha_g, c.seed, c.layer, c.spearman)?;
        }
    }

    let mut meta = reports::RunMeta::new("sweep", loaded);
    meta.insert("alpha_grid", serde_json::Value::from(sweep.alpha_g.clone()));
    meta.insert("rate_grid", serde_json::Value::from(sweep.rates.clone()));
    meta.insert(
        "seeds",
        serde_json::Value::from(seeds.iter().map(|&s| s as i64).collect::<Vec<_>>()),
    );
    meta.insert("cells", cells.len() as u64);
    reports::write_json(&out.join("run_meta.json"), &meta)?;

    Ok(SweepOutcome {
        rows,
        correlations,
        csv: csv_path,
    })
}

/// Train one model at `alpha_g`, then prune-and-evaluate at every rate.
fn run_cell(
    loaded: &LoadedConfig,
    alpha: f64,
    seed: u64,
    rates: &[f64],
) -> Result<(Vec<SweepRow>, Vec<MassCorrelation>)> {
    let train_started = Instant::now();
    let (train_ds, test_ds) = {
        let mut per_seed = loaded.clone();
        per_seed.config.seed = seed;
        dataset::load(&per_seed, seed)?
    };
    let mut model = {
        let mut per_seed = loaded.clone();
        per_seed.config.seed = seed;
        commands::build_or_load_model(&per_seed, seed)?
    };

    let gravity: Option<GravityConfig> = if alpha > 0.0 {
        let base = match &loaded.config.gravity {
            Some(section) => {
                let mut cfg = crate::config::gravity_config(section, &model)?;
                cfg.alpha_g = alpha;
                cfg
            }
            None => GravityConfig::new(alpha, model.default_prune_set()),
        };
        Some(base)
    } else {
        None
    };

    let mut opts = commands::train_options(loaded, gravity.clone());
    opts.seed = seed;
    gprune_core::train(&mut model, &train_ds, &opts)?;
    let train_secs = train_started.elapsed().as_secs_f64();

    let mut correlations = Vec::new();
    if let Some(cfg) = &gravity {
        for (id, state) in gprune_core::train::snapshot_states(&model, cfg)? {
            let mut masses = Vec::new();
            let mut seps = Vec::new();
            for (n, &m) in state.masses.iter().enumerate() {
                if n != state.attractor_index {
                    masses.push(m);
                    seps.push(state.attractor_index.abs_diff(n) as f64);
                }
            }
            if masses.len() > 1 {
                correlations.push(MassCorrelation {
                    alpha_g: alpha,
                    seed,
                    layer: model.layer(id).name.clone(),
                    spearman: gprune_core::check::spearman(&masses, &seps),
                });
            }
        }
    }

    let set = commands::prune_set_for(loaded, &model)?;
    let base_cost = cost::cost_model(&model)?;
    let batch = loaded.config.train.batch_size;

    let mut rows = Vec::with_capacity(rates.len());
    for &rate in rates {
        let prune_started = Instant::now();
        let (accuracy, speedup, compression) = if rate == 0.0 {
            let (_, acc) = gprune_core::evaluate(&model, &test_ds, batch)?;
            (acc, 1.0, 1.0)
        } else {
            let plan = pruning::make_pruning_plan(&model, rate, &set)?;
            let pruned = pruning::apply_plan(&model, &plan)?;
            let report = cost::cost_model(&pruned)?;
            let (s, c) = cost::speedup_compression(&base_cost, &report)?;
            let (_, acc) = gprune_core::evaluate(&pruned, &test_ds, batch)?;
            (acc, s, c)
        };
        rows.push(SweepRow {
            alpha_g: alpha,
            rate,
            seed,
            accuracy,
            speedup,
            compression,
            train_secs,
            prune_secs: prune_started.elapsed().as_secs_f64(),
        });
    }
    Ok((rows, correlations))
}

/// One gnuplot-ready data file per gravity rate: columns are the pruning
/// rate, the median pruned accuracy over seeds, and the median speedup.
fn write_curves(out: &Path, alphas: &[f64], rates: &[f64], rows: &[SweepRow]) -> Result<()> {
    for &alpha in alphas {
        let path = out.join(format!("curve_alpha_{alpha}.dat"));
        let mut f = std::fs::File::create(&path)?;
        writeln!(f, "# pruning_rate  median_accuracy  median_speedup")?;
        for &rate in rates {
            let mut accs: Vec<f64> = rows
                .iter()
                .filter(|r| r.alpha_g == alpha && r.rate == rate)
                .map(|r| r.accuracy)
                .collect();
            let mut speeds: Vec<f64> = rows
                .iter()
                .filter(|r| r.alpha_g == alpha && r.rate == rate)
                .map(|r| r.speedup)
                .collect();
            if accs.is_empty() {
                continue;
            }
            writeln!(f, "{rate}  {:.2}  {:.4}", median(&mut accs), median(&mut speeds))?;
        }
    }
    Ok(())
}

/// Median of a nonempty slice (sorted in place).
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
