//! `gprune analyze`: inspect a checkpoint — per-filter masses, attractor
//! indices, mass/distance correlation and the analytic cost report.

use crate::config::LoadedConfig;
use crate::errors::Result;
use crate::{commands, reports};
use gprune_core::cost::CostReport;
use gprune_core::gravity::{self, AttractorMode, DEFAULT_G};
use gprune_core::{check, cost};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct LayerAnalysis {
    pub name: String,
    pub filters: usize,
    pub attractor_index: usize,
    /// Spearman correlation of mass against index distance from the
    /// attractor (attractor excluded).
    pub mass_distance_spearman: f64,
}

#[derive(Debug)]
pub struct AnalyzeOutcome {
    pub cost: CostReport,
    pub layers: Vec<LayerAnalysis>,
    pub masses_csv: PathBuf,
}

pub fn run(
    loaded: &LoadedConfig,
    checkpoint: &Path,
    out_flag: Option<&Path>,
) -> Result<AnalyzeOutcome> {
    let out = commands::resolve_out_dir(loaded, out_flag)?;
    let (model, ckpt_meta) = gprune_core::load_checkpoint(checkpoint)?;

    let mode: AttractorMode = loaded
        .config
        .gravity
        .as_ref()
        .map(|g| g.attractor_mode.into())
        .unwrap_or(AttractorMode::MaxMass);
    let g = loaded.config.gravity.as_ref().map(|g| g.g).unwrap_or(DEFAULT_G);
    let set = commands::prune_set_for(loaded, &model)?;

    let report = cost::cost_model(&model)?;
    reports::write_cost_report(&out.join("cost.csv"), &report)?;

    let masses_csv = out.join("masses.csv");
    let mut f = std::fs::File::create(&masses_csv)?;
    writeln!(f, "layer_id,filter_index,mass,distance,force")?;
    let mut layers = Vec::new();
    for &id in &set {
        let weight = model.conv_weight(id).expect("prunable implies conv");
        let state = gravity::layer_state(weight, mode, g, None)?;
        let name = model.layer(id).name.clone();
        for n in 0..state.masses.len() {
            writeln!(
                f,
                "{name},{n},{:e},{:e},{:e}",
                state.masses[n], state.distances[n], state.forces[n]
            )?;
        }
        let mut masses = Vec::new();
        let mut seps = Vec::new();
        for (n, &m) in state.masses.iter().enumerate() {
            if n != state.attractor_index {
                masses.push(m);
                seps.push(state.attractor_index.abs_diff(n) as f64);
            }
        }
        let rho = if masses.len() > 1 {
            check::spearman(&masses, &seps)
        } else {
            0.0
        };
        println!(
            "{name}: {} filters, attractor {}, mass/distance spearman {rho:.3}",
            state.masses.len(),
            state.attractor_index
        );
        layers.push(LayerAnalysis {
            name,
            filters: state.masses.len(),
            attractor_index: state.attractor_index,
            mass_distance_spearman: rho,
        });
    }
    println!(
        "cost: {} params, {} flops ({} layers)",
        report.total_params,
        report.total_flops,
        report.layers.len()
    );

    let mut meta = reports::RunMeta::new("analyze", loaded);
    meta.insert("checkpoint", checkpoint.display().to_string());
    meta.insert("checkpoint_epoch", ckpt_meta.epoch);
    meta.insert("checkpoint_seed", ckpt_meta.seed);
    meta.insert("total_params", report.total_params);
    meta.insert("total_flops", report.total_flops);
    reports::write_json(&out.join("run_meta.json"), &meta)?;

    Ok(AnalyzeOutcome {
        cost: report,
        layers,
        masses_csv,
    })
}
