//! CSV reports and the run-metadata JSON.

use crate::errors::{CliError, Result};
use gprune_core::cost::CostReport;
use gprune_core::graph::ModelGraph;
use gprune_core::train::EpochLog;
use serde::Serialize;
use std::path::Path;

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Report(format!("{}: {e}", path.display())))
}

fn fail(path: &Path, e: csv::Error) -> CliError {
    CliError::Report(format!("{}: {e}", path.display()))
}

/// `epoch, loss, train_acc, lr, wall_secs` plus one total-force column per
/// prunable layer.
pub fn write_train_log(path: &Path, model: &ModelGraph, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let force_layers: Vec<(usize, String)> = logs
        .first()
        .map(|l| {
            l.states
                .iter()
                .map(|(id, _)| (*id, model.layer(*id).name.clone()))
                .collect()
        })
        .unwrap_or_default();
    let mut header = vec![
        "epoch".to_string(),
        "loss".to_string(),
        "train_acc".to_string(),
        "lr".to_string(),
        "wall_secs".to_string(),
    ];
    header.extend(force_layers.iter().map(|(_, n)| format!("force_{n}")));
    w.write_record(&header).map_err(|e| fail(path, e))?;
    for log in logs {
        let mut row = vec![
            log.epoch.to_string(),
            format!("{:.6}", log.loss),
            format!("{:.2}", log.accuracy),
            format!("{}", log.lr),
            format!("{:.3}", log.wall_secs),
        ];
        for (id, _) in &force_layers {
            let force = log
                .states
                .iter()
                .find(|(l, _)| l == id)
                .map(|(_, s)| s.total_force)
                .unwrap_or(0.0);
            row.push(format!("{force:e}"));
        }
        w.write_record(&row).map_err(|e| fail(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-epoch, per-filter gravity log:
/// `epoch, layer_id, filter_index, mass, distance, force`.
pub fn write_gravity_log(path: &Path, model: &ModelGraph, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "layer_id", "filter_index", "mass", "distance", "force"])
        .map_err(|e| fail(path, e))?;
    for log in logs {
        for (id, state) in &log.states {
            let name = &model.layer(*id).name;
            for n in 0..state.masses.len() {
                w.write_record(&[
                    log.epoch.to_string(),
                    name.clone(),
                    n.to_string(),
                    format!("{:e}", state.masses[n]),
                    format!("{:e}", state.distances[n]),
                    format!("{:e}", state.forces[n]),
                ])
                .map_err(|e| fail(path, e))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `layer_id, kind, params, flops` with a trailing totals row.
pub fn write_cost_report(path: &Path, report: &CostReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["layer_id", "kind", "params", "flops"])
        .map_err(|e| fail(path, e))?;
    for layer in &report.layers {
        w.write_record(&[
            layer.name.clone(),
            layer.kind.to_string(),
            layer.params.to_string(),
            layer.flops.to_string(),
        ])
        .map_err(|e| fail(path, e))?;
    }
    w.write_record(&[
        "total".to_string(),
        "".to_string(),
        report.total_params.to_string(),
        report.total_flops.to_string(),
    ])
    .map_err(|e| fail(path, e))?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioRow {
    pub rate: f64,
    pub params: u64,
    pub flops: u64,
    pub speedup: f64,
    pub compression: f64,
}

pub fn write_ratios(path: &Path, rows: &[RatioRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["rate", "params", "flops", "speedup", "compression"])
        .map_err(|e| fail(path, e))?;
    for r in rows {
        w.write_record(&[
            format!("{}", r.rate),
            r.params.to_string(),
            r.flops.to_string(),
            format!("{:.4}", r.speedup),
            format!("{:.4}", r.compression),
        ])
        .map_err(|e| fail(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Anything JSON-serializable, pretty-printed to `path`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Report(format!("{}: {e}", path.display())))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Run provenance written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunMeta {
    pub command: String,
    pub config_path: String,
    pub config_sha256: String,
    pub seed: u64,
    pub tool_version: String,
    pub checkpoint_format_version: u32,
    pub wall_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gravity: Option<GravityMeta>,
    #[serde(skip_serializing_if = "serde_json::Map::is_empty", default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Serialize)]
pub struct GravityMeta {
    pub g: f64,
    pub alpha_g: f64,
    pub attractor_mode: String,
    pub prune_layers: Vec<String>,
    pub recompute_attractor: bool,
}

impl RunMeta {
    pub fn new(command: &str, loaded: &crate::config::LoadedConfig) -> Self {
        RunMeta {
            command: command.to_string(),
            config_path: loaded.path.display().to_string(),
            config_sha256: loaded.sha256.clone(),
            seed: loaded.config.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format_version: gprune_core::checkpoint::FORMAT_VERSION,
            wall_secs: 0.0,
            gravity: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn with_gravity(mut self, cfg: &gprune_core::GravityConfig, model: &ModelGraph) -> Self {
        self.gravity = Some(GravityMeta {
            g: cfg.g,
            alpha_g: cfg.alpha_g,
            attractor_mode: match cfg.attractor_mode {
                gprune_core::AttractorMode::MaxMass => "max-mass".into(),
                gprune_core::AttractorMode::IndexZero => "index-zero".into(),
            },
            prune_layers: cfg
                .prune_layers
                .iter()
                .map(|&id| model.layer(id).name.clone())
                .collect(),
            recompute_attractor: cfg.recompute_attractor,
        });
        self
    }

    pub fn insert(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.extra.insert(key.to_string(), value.into());
    }
}
