use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gram::CalibGram;
use super::layer::{BlockReport, LayerOutcome, LayerQuantizer, LayerReport, QuantConfig};
use crate::error::{Error, Result};
use crate::tensorio::{load_calib, load_tensor, write_packed, LayerManifest};

pub const REPORT_FILE: &str = "model_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFailure {
    pub layer: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub config: QuantConfig,
    pub layers: Vec<LayerReport>,
    /// Artifact file name per entry of `layers`, relative to the output directory.
    pub files: Vec<String>,
    pub failures: Vec<LayerFailure>,
    pub total_weights: usize,
    pub total_file_bytes: usize,
    pub size_reduction_vs_f32: f64,
    pub size_reduction_vs_f16: f64,
}

/// File-system-safe stem for a layer name.
pub fn artifact_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect()
}

pub fn artifact_file(name: &str) -> String {
    format!("{}.pt2t", artifact_stem(name))
}

pub fn blocks_file(name: &str) -> String {
    format!("{}.blocks.csv", artifact_stem(name))
}

/// Quantizes one manifest entry, loading its weights and calibration.
pub fn quantize_entry(manifest: &LayerManifest, name: &str, cfg: &QuantConfig) -> Result<LayerOutcome> {
    let w = load_tensor(manifest, name)?;
    let gram = match load_calib(manifest, name)? {
        Some(batch) => {
            if batch.features() != w.cols() {
                return Err(Error::entry(name, "calibration feature dimension does not match weight columns"));
            }
            CalibGram::from_batch(&batch)
        }
        None if cfg.allow_identity_gram => {
            log::info!("{name}: no calibration data, using identity gram");
            CalibGram::identity(w.cols())
        }
        None => return Err(Error::MissingCalibration(name.to_string())),
    };
    let mut outcome = LayerQuantizer::new(gram, cfg.lambda_frac).quantize(&w, cfg)?;
    outcome.report.layer = name.to_string();
    Ok(outcome)
}

pub fn write_blocks_csv(path: &Path, blocks: &[BlockReport]) -> Result<()> {
    let mut out = String::from("block_index,variance,itf_iters,itf_converged,tile_e_w,tile_e_x_before_aga,tile_e_x_after_aga\n");
    for b in blocks {
        out.push_str(&format!(
            "{},{:e},{},{},{:e},{:e},{:e}\n",
            b.block, b.variance, b.itf_iters, b.itf_converged, b.tile_e_w, b.tile_e_x_before_aga, b.tile_e_x_after_aga
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Quantizes every manifest entry into `out_dir`, one PT2T file per layer,
/// plus per-block CSVs and a JSON report. Layer failures are recorded in the
/// report rather than aborting the run.
pub fn quantize_model(manifest: &LayerManifest, cfg: &QuantConfig, out_dir: &Path, jobs: usize) -> Result<ModelReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let run_one = |name: &str| -> Result<LayerReport> {
        let outcome = quantize_entry(manifest, name, cfg)?;
        write_packed(&outcome.packed, out_dir.join(artifact_file(name)))?;
        write_blocks_csv(&out_dir.join(blocks_file(name)), &outcome.blocks)?;
        Ok(outcome.report)
    };
    let names: Vec<&str> = manifest.entries.iter().map(|e| e.name.as_str()).collect();
    let results: Vec<Result<LayerReport>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| names.par_iter().map(|n| run_one(n)).collect())
    } else {
        names.iter().map(|n| run_one(n)).collect()
    };

    let mut layers = Vec::new();
    let mut files = Vec::new();
    let mut failures = Vec::new();
    for (name, res) in names.iter().zip(results) {
        match res {
            Ok(r) => {
                files.push(artifact_file(name));
                layers.push(r);
            }
            Err(e) => {
                log::error!("{name}: {e}");
                failures.push(LayerFailure {
                    layer: name.to_string(),
                    error: e.to_string(),
                });
            }
        }
    }
    let total_weights: usize = layers.iter().map(|l| l.n * l.m).sum();
    let total_file_bytes: usize = layers.iter().map(|l| l.file_bytes).sum();
    let ratio = |bits: f64| {
        if total_file_bytes == 0 {
            0.0
        } else {
            bits * total_weights as f64 / (8.0 * total_file_bytes as f64)
        }
    };
    let report = ModelReport {
        config: cfg.clone(),
        size_reduction_vs_f32: ratio(32.0),
        size_reduction_vs_f16: ratio(16.0),
        layers,
        files,
        failures,
        total_weights,
        total_file_bytes,
    };
    let path = out_dir.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
