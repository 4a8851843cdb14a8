//! Seeded synthetic layers: Gaussian weights with per-row offsets and a few
//! high-variance outlier columns, and heavy-tailed calibration activations.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal, StudentT, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;
use crate::tensorio::{write_raw_f32, CalibBatch, LayerManifest, ManifestEntry, TensorDtype};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub layers: usize,
    pub n: usize,
    pub m: usize,
    pub samples: usize,
    /// Fraction of columns whose spread is multiplied by `outlier_scale`.
    pub outlier_frac: f64,
    pub outlier_scale: f64,
    /// Row offsets are drawn uniformly from `[-offset_range, offset_range]`.
    pub offset_range: f64,
    /// Degrees of freedom of the Student-t activations.
    pub activation_dof: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            layers: 2,
            n: 64,
            m: 256,
            samples: 512,
            outlier_frac: 0.05,
            outlier_scale: 10.0,
            offset_range: 1.0,
            activation_dof: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthLayer {
    pub weights: DenseTensor,
    pub calib: CalibBatch,
    pub outlier_cols: Vec<usize>,
}

fn f32_exact(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Generates layer `layer` of the suite for `seed`. Values are rounded
/// through f32 so they match what the written files hold.
pub fn generate_layer(seed: u64, spec: &SynthSpec, layer: usize) -> SynthLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    let (n, m) = (spec.n, spec.m);

    let n_out = ((spec.outlier_frac * m as f64).round() as usize).min(m);
    let mut outlier_cols = index::sample(&mut rng, m, n_out).into_vec();
    outlier_cols.sort_unstable();
    let mut col_scale = vec![1.0; m];
    for &c in &outlier_cols {
        col_scale[c] = spec.outlier_scale;
    }
    let offsets: Vec<f64> = if spec.offset_range > 0.0 {
        let u = Uniform::new_inclusive(-spec.offset_range, spec.offset_range).expect("valid range");
        (0..n).map(|_| u.sample(&mut rng)).collect()
    } else {
        vec![0.0; n]
    };
    let weights = DenseTensor::from_fn(n, m, |i, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        f32_exact(offsets[i] + col_scale[j] * z)
    });

    let feat = LogNormal::new(0.0, 0.75).expect("valid lognormal");
    let feat_scale: Vec<f64> = (0..m).map(|_| feat.sample(&mut rng)).collect();
    let t = StudentT::new(spec.activation_dof).expect("positive dof");
    let data: Vec<f64> = (0..spec.samples * m)
        .map(|idx| f32_exact(feat_scale[idx % m] * t.sample(&mut rng)))
        .collect();
    let calib = CalibBatch::new(spec.samples, m, data).expect("finite activations");

    SynthLayer {
        weights,
        calib,
        outlier_cols,
    }
}

/// Writes `spec.layers` layers plus `manifest.json` into `dir`.
pub fn write_synthetic(dir: &Path, seed: u64, spec: &SynthSpec) -> Result<LayerManifest> {
    if spec.n == 0 || spec.m == 0 || spec.samples == 0 {
        return Err(Error::Config("synthetic shapes must be positive".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(spec.layers);
    for l in 0..spec.layers {
        let layer = generate_layer(seed, spec, l);
        let name = format!("layer{l}");
        let path = format!("{name}.weight.bin");
        let calib_path = format!("{name}.calib.bin");
        write_raw_f32(&dir.join(&path), layer.weights.data())?;
        write_raw_f32(&dir.join(&calib_path), layer.calib.as_tensor().data())?;
        entries.push(ManifestEntry {
            name,
            shape: [spec.n, spec.m],
            dtype: TensorDtype::F32,
            path,
            calib_path: Some(calib_path),
        });
    }
    let manifest = LayerManifest::new(entries, dir);
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_layer() {
        let spec = SynthSpec {
            n: 8,
            m: 20,
            samples: 16,
            ..Default::default()
        };
        let a = generate_layer(5, &spec, 1);
        let b = generate_layer(5, &spec, 1);
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.calib, b.calib);
        assert_eq!(a.outlier_cols.len(), 1);
        let c = generate_layer(5, &spec, 0);
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn plain_gaussian_without_outliers_or_offsets() {
        let spec = SynthSpec {
            n: 64,
            m: 64,
            samples: 4,
            outlier_frac: 0.0,
            offset_range: 0.0,
            ..Default::default()
        };
        let l = generate_layer(1, &spec, 0);
        assert!(l.outlier_cols.is_empty());
        let d = l.weights.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 0.1, "{mean}");
        assert!((var - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn outlier_columns_are_wider() {
        let spec = SynthSpec {
            n: 128,
            m: 40,
            samples: 4,
            outlier_frac: 0.1,
            offset_range: 0.0,
            ..Default::default()
        };
        let l = generate_layer(3, &spec, 0);
        let col_var = |j: usize| (0..128).map(|i| l.weights.get(i, j).powi(2)).sum::<f64>() / 128.0;
        for j in 0..40 {
            if l.outlier_cols.contains(&j) {
                assert!(col_var(j) > 30.0);
            } else {
                assert!(col_var(j) < 3.0);
            }
        }
    }
}
