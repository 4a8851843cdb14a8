use serde::{Deserialize, Serialize};

use super::gram::CalibGram;
use super::hessian::damped_inverse;
use crate::atq::{self, AtqState, TileGrid};
use crate::error::{Error, Result};
use crate::linalg;
use crate::ssr::{self, PermutationTrace};
use crate::tensor::DenseTensor;
use crate::tensorio::encoded_len;
use crate::ternary::{canonicalize_group, dequantize, grid_value, n_groups, GridParams, PackedTernaryTensor, ScaleDtype, TernaryMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub group_size: usize,
    pub lambda_frac: f64,
    pub max_iters: usize,
    pub scale_dtype: ScaleDtype,
    pub ssr: bool,
    pub aga: bool,
    pub itf: bool,
    pub compensation: bool,
    /// Quantize layers without calibration data against an identity Gram.
    pub allow_identity_gram: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            group_size: 128,
            lambda_frac: 0.01,
            max_iters: atq::DEFAULT_MAX_ITERS,
            scale_dtype: ScaleDtype::F32,
            ssr: true,
            aga: true,
            itf: true,
            compensation: true,
            allow_identity_gram: true,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::Config("group size must be at least 1".into()));
        }
        if !(self.lambda_frac > 0.0 && self.lambda_frac < 1.0) {
            return Err(Error::Config(format!("lambda_frac must lie in (0, 1), got {}", self.lambda_frac)));
        }
        Ok(())
    }
}

/// Per-block diagnostics, in quantization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    /// Original column indices, ascending.
    pub columns: Vec<usize>,
    /// Variance of the original weights in this block.
    pub variance: f64,
    pub itf_iters: usize,
    pub itf_converged: bool,
    /// Tile weight error against the compensated residual, after the final grid.
    pub tile_e_w: f64,
    /// Tile activation error before and after grid alignment (equal when alignment is off).
    pub tile_e_x_before_aga: f64,
    pub tile_e_x_after_aga: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub e_w: f64,
    pub e_x_gram: f64,
    /// Trit section only.
    pub bits_per_weight: f64,
    /// Whole PT2T file.
    pub total_bits_per_weight: f64,
    pub file_bytes: usize,
    pub itf_iters_mean: f64,
    pub itf_unconverged_blocks: usize,
    pub blocks: usize,
    pub ssr: bool,
    pub aga: bool,
    pub itf: bool,
    pub compensation: bool,
    pub gram_fallback: bool,
    pub calib_samples: usize,
    pub dead_columns: usize,
    pub aga_e_x_before: f64,
    pub aga_e_x_after: f64,
    pub block_variance_mean: f64,
}

#[derive(Debug, Clone)]
pub struct LayerOutcome {
    pub packed: PackedTernaryTensor,
    pub report: LayerReport,
    pub blocks: Vec<BlockReport>,
}

/// `sum_i (w_i - w_hat_i) C (w_i - w_hat_i)ᵀ` over rows.
pub fn output_error(w: &DenseTensor, w_hat: &DenseTensor, gram: &CalibGram) -> Result<f64> {
    if w.shape() != w_hat.shape() || w.cols() != gram.dim() {
        return Err(Error::ShapeMismatch {
            expected: w.shape().to_vec(),
            actual: vec![w_hat.rows(), w_hat.cols(), gram.dim()],
        });
    }
    let r: Vec<f64> = w.data().iter().zip(w_hat.data()).map(|(a, b)| a - b).collect();
    Ok(atq::quadratic_rows(&r, w.rows(), w.cols(), gram.matrix()))
}

/// Quantizes layers against one Gram; the damped inverse Hessian is
/// computed once and shared by every call.
pub struct LayerQuantizer {
    gram: CalibGram,
    lambda_frac: f64,
    inverse: Option<(Vec<f64>, Vec<bool>)>,
}

impl LayerQuantizer {
    pub fn new(gram: CalibGram, lambda_frac: f64) -> Self {
        Self {
            gram,
            lambda_frac,
            inverse: None,
        }
    }

    pub fn gram(&self) -> &CalibGram {
        &self.gram
    }

    fn inverse(&mut self) -> Result<&(Vec<f64>, Vec<bool>)> {
        if self.inverse.is_none() {
            let (inv, _, dead) = damped_inverse(&self.gram, self.lambda_frac)?;
            self.inverse = Some((inv, dead));
        }
        Ok(self.inverse.as_ref().expect("just set"))
    }

    pub fn quantize(&mut self, w: &DenseTensor, cfg: &QuantConfig) -> Result<LayerOutcome> {
        cfg.validate()?;
        if (cfg.lambda_frac - self.lambda_frac).abs() > 0.0 {
            self.lambda_frac = cfg.lambda_frac;
            self.inverse = None;
        }
        let (n, m, k) = (w.rows(), w.cols(), cfg.group_size);
        if self.gram.dim() != m {
            return Err(Error::ShapeMismatch {
                expected: vec![m, m],
                actual: vec![self.gram.dim(), self.gram.dim()],
            });
        }
        if let Some(index) = w.first_non_finite() {
            return Err(Error::NonFinite { name: "weights".into(), index });
        }

        let dead_columns;
        // H⁻¹ restricted to the remaining columns, in `remaining` order
        let mut hinv = if cfg.compensation {
            let (inv, dead) = self.inverse()?;
            dead_columns = dead.iter().filter(|d| **d).count();
            inv.clone()
        } else {
            dead_columns = (0..m).filter(|&i| self.gram.get(i, i) == 0.0).count();
            Vec::new()
        };
        let gram = &self.gram;

        let groups = n_groups(m, k);
        let mut remaining: Vec<usize> = (0..m).collect();
        // residual weights of the remaining columns, n x remaining.len()
        let mut work = w.data().to_vec();
        let mut trace = PermutationTrace::new(m);
        let mut codes = vec![0i8; n * m];
        let mut alpha = vec![0f32; n * groups];
        let mut mu = vec![0f32; n * groups];
        let mut block_reports = Vec::with_capacity(groups);
        let (mut aga_before, mut aga_after) = (0.0, 0.0);

        for b in 0..groups {
            let r = remaining.len();
            let resid = DenseTensor::new(n, r, std::mem::take(&mut work))?;
            let bpos: Vec<usize> = if cfg.ssr {
                let local: Vec<usize> = (0..r).collect();
                ssr::select_next_block(&resid, &local, k)
            } else {
                (0..k.min(r)).collect()
            };
            let g = bpos.len();
            let mut in_block = vec![false; r];
            bpos.iter().for_each(|&p| in_block[p] = true);
            let rpos: Vec<usize> = (0..r).filter(|&p| !in_block[p]).collect();
            let cols: Vec<usize> = bpos.iter().map(|&p| remaining[p]).collect();

            let tile = resid.gather_cols(&bpos);
            let gram_tile = gram.submatrix(&cols);

            let init = atq::ternary_init(&tile);
            let mut state = if cfg.itf {
                atq::itf(&tile, init, cfg.max_iters)
            } else {
                let e_w = atq::tile_weight_error(&tile, &init.0, &init.1);
                AtqState {
                    grid: init.0,
                    trits: init.1,
                    e_w,
                    iteration: 0,
                    converged: true,
                    trace: vec![e_w],
                }
            };
            let ex_before = atq::tile_output_error(&tile, &state.grid, &state.trits, &gram_tile);
            let ex_after = if cfg.aga {
                state.grid = atq::aga_align(&tile, &state.trits, &gram_tile, &state.grid)?;
                atq::tile_output_error(&tile, &state.grid, &state.trits, &gram_tile)
            } else {
                ex_before
            };
            aga_before += ex_before;
            aga_after += ex_after;

            let (stored, trits) = finalize_tile(state.grid, state.trits, cfg.scale_dtype);
            let mut err = vec![0.0; n * g];
            let mut tile_e_w = 0.0;
            for i in 0..n {
                let (a, u) = (stored.0[i], stored.1[i]);
                alpha[i * groups + b] = a;
                mu[i * groups + b] = u;
                let trow = trits.row(i);
                let wrow = tile.row(i);
                codes[i * m + b * k..i * m + b * k + g].copy_from_slice(trow);
                for j in 0..g {
                    let e = wrow[j] - grid_value(a, u, trow[j]);
                    err[i * g + j] = e;
                    tile_e_w += e * e;
                }
            }

            let mut rest = gather(&resid, &rpos);
            let rr = rpos.len();
            if cfg.compensation && rr > 0 {
                let hbb = sub(&hinv, r, &bpos, &bpos);
                let hbr = sub(&hinv, r, &bpos, &rpos);
                let mut chol = hbb;
                linalg::cholesky_lower(&mut chol, g)?;
                let mut coef = hbr.clone();
                linalg::cholesky_solve(&chol, g, &mut coef, rr);
                // rest -= E · Hbb⁻¹ Hbr
                linalg::gemm(n, g, rr, -1.0, &err, &coef, 1.0, &mut rest);
                // Hrr -= Hbrᵀ Hbb⁻¹ Hbr
                let mut hrr = sub(&hinv, r, &rpos, &rpos);
                linalg::gemm_tn(rr, g, rr, -1.0, &hbr, &coef, 1.0, &mut hrr);
                linalg::symmetrize(&mut hrr, rr);
                hinv = hrr;
            }

            block_reports.push(BlockReport {
                block: b,
                columns: cols.clone(),
                variance: 0.0,
                itf_iters: state.iteration,
                itf_converged: state.converged,
                tile_e_w,
                tile_e_x_before_aga: ex_before,
                tile_e_x_after_aga: ex_after,
            });
            trace.extend(&cols)?;
            remaining = rpos.iter().map(|&p| remaining[p]).collect();
            work = rest;
        }
        debug_assert!(trace.is_complete());

        let perm: Vec<u32> = trace.order().iter().map(|&c| c as u32).collect();
        let packed = PackedTernaryTensor::from_trits(
            &TernaryMatrix::new(n, m, codes)?,
            GridParams::new(n, groups, alpha, mu)?,
            perm,
            k,
            cfg.scale_dtype,
        )?;

        let variances = ssr::block_variance_profile(w, trace.order(), k);
        for (br, v) in block_reports.iter_mut().zip(&variances) {
            br.variance = *v;
        }
        let w_hat = dequantize(&packed);
        let e_w = crate::ternary::weight_error(w, &w_hat)?;
        let e_x_gram = output_error(w, &w_hat, gram)?;
        let file_bytes = encoded_len(n, m, k, cfg.scale_dtype);
        let report = LayerReport {
            layer: String::new(),
            n,
            m,
            k,
            e_w,
            e_x_gram,
            bits_per_weight: packed.trit_bits_per_weight(),
            total_bits_per_weight: 8.0 * file_bytes as f64 / (n * m) as f64,
            file_bytes,
            itf_iters_mean: block_reports.iter().map(|b| b.itf_iters as f64).sum::<f64>() / groups as f64,
            itf_unconverged_blocks: block_reports.iter().filter(|b| !b.itf_converged).count(),
            blocks: groups,
            ssr: cfg.ssr,
            aga: cfg.aga,
            itf: cfg.itf,
            compensation: cfg.compensation,
            gram_fallback: gram.is_identity_fallback(),
            calib_samples: gram.count(),
            dead_columns,
            aga_e_x_before: aga_before,
            aga_e_x_after: aga_after,
            block_variance_mean: variances.iter().sum::<f64>() / variances.len() as f64,
        };
        Ok(LayerOutcome {
            packed,
            report,
            blocks: block_reports,
        })
    }
}

/// Canonicalizes every row of a tile and rounds its grid to storage precision.
fn finalize_tile(grid: TileGrid, mut trits: TernaryMatrix, dtype: ScaleDtype) -> ((Vec<f32>, Vec<f32>), TernaryMatrix) {
    let n = grid.rows();
    let mut alpha = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    for i in 0..n {
        let mut a = grid.alpha[i];
        let row = trits.row_mut(i);
        canonicalize_group(&mut a, row);
        let a32 = dtype.round(a);
        if a32 == 0.0 {
            row.iter_mut().for_each(|t| *t = 0);
        }
        alpha.push(a32);
        mu.push(dtype.round(grid.mu[i]));
    }
    ((alpha, mu), trits)
}

fn gather(t: &DenseTensor, cols: &[usize]) -> Vec<f64> {
    t.gather_cols(cols).into_data()
}

fn sub(a: &[f64], stride: usize, rows: &[usize], cols: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &i in rows {
        let row = &a[i * stride..(i + 1) * stride];
        out.extend(cols.iter().map(|&j| row[j]));
    }
    out
}

/// Quantizes one weight matrix against a calibration Gram.
pub fn quantize_layer(w: &DenseTensor, gram: &CalibGram, cfg: &QuantConfig) -> Result<LayerOutcome> {
    LayerQuantizer::new(gram.clone(), cfg.lambda_frac).quantize(w, cfg)
}
