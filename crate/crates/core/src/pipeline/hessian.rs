use super::gram::CalibGram;
use crate::error::Result;
use crate::linalg;

/// Damped Hessian `H = C + lambda I` and its inverse.
#[derive(Debug, Clone)]
pub struct InverseHessian {
    pub dim: usize,
    pub lambda: f64,
    /// Columns with zero calibration energy.
    pub dead: Vec<bool>,
    /// `H⁻¹`, row-major.
    pub inverse: Vec<f64>,
    /// Upper-triangular `U` with `H⁻¹ = Uᵀ U`.
    pub factor: Vec<f64>,
}

/// Returns `(H, lambda, dead)` with `lambda = lambda_frac * mean(diag C)`.
pub(crate) fn damped(gram: &CalibGram, lambda_frac: f64) -> (Vec<f64>, f64, Vec<bool>) {
    let m = gram.dim();
    let mean_diag = (0..m).map(|i| gram.get(i, i)).sum::<f64>() / m as f64;
    // an all-zero Gram has no scale of its own
    let lambda = if mean_diag > 0.0 { lambda_frac * mean_diag } else { lambda_frac };
    let mut h = gram.matrix().to_vec();
    let mut dead = vec![false; m];
    for i in 0..m {
        if gram.get(i, i) == 0.0 {
            dead[i] = true;
        }
        h[i * m + i] += lambda;
    }
    (h, lambda, dead)
}

pub(crate) fn damped_inverse(gram: &CalibGram, lambda_frac: f64) -> Result<(Vec<f64>, f64, Vec<bool>)> {
    let m = gram.dim();
    let (h, lambda, dead) = damped(gram, lambda_frac);
    let inv = linalg::spd_inverse(&h, m)?;
    Ok((inv, lambda, dead))
}

pub fn hessian_prepare(gram: &CalibGram, lambda_frac: f64) -> Result<InverseHessian> {
    let m = gram.dim();
    let (inverse, lambda, dead) = damped_inverse(gram, lambda_frac)?;
    let factor = linalg::cholesky_upper(&inverse, m)?;
    Ok(InverseHessian {
        dim: m,
        lambda,
        dead,
        inverse,
        factor,
    })
}
