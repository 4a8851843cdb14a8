//! Asymmetric ternary quantizer for one tile (all rows x one column group).
//!
//! Every row of a tile gets its own grid `{mu - alpha, mu, mu + alpha}`. The
//! quantizer runs in three stages: threshold initialization around the row
//! mean, iterative ternary fitting (closed-form grid, then per-element
//! rounding, until the code plane stops changing), and a single
//! activation-weighted re-solve of the grid with the code plane frozen.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::DenseTensor;
use crate::ternary::TernaryMatrix;

/// Threshold factor applied to the mean absolute centered weight.
pub const INIT_THRESHOLD: f64 = 0.75;
pub const DEFAULT_MAX_ITERS: usize = 50;
/// Relative tolerance for a vanishing weighted normal-equation determinant.
pub const SINGULAR_TOL: f64 = 1e-12;
/// Relative asymmetry allowed in a Gram tile.
pub const GRAM_SYMMETRY_TOL: f64 = 1e-9;

/// Per-row scale and offset for one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
}

impl TileGrid {
    pub fn rows(&self) -> usize {
        self.alpha.len()
    }
}

/// Working set of the quantizer after fitting.
#[derive(Debug, Clone)]
pub struct AtqState {
    pub grid: TileGrid,
    pub trits: TernaryMatrix,
    /// Weight error of `grid`/`trits` against the tile.
    pub e_w: f64,
    /// Completed fitting iterations (largest over rows).
    pub iteration: usize,
    pub converged: bool,
    /// Tile weight error after every half-step, starting with the initial state.
    pub trace: Vec<f64>,
}

impl AtqState {
    pub fn recompute_error(&self, w: &DenseTensor) -> f64 {
        tile_weight_error(w, &self.grid, &self.trits)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Threshold initialization of one row; returns `(alpha, mu)`.
pub fn init_row(w: &[f64], trits: &mut [i8]) -> (f64, f64) {
    let mu = mean(w);
    let delta = INIT_THRESHOLD * w.iter().map(|x| (x - mu).abs()).sum::<f64>() / w.len() as f64;
    let mut num = 0.0;
    let mut count = 0usize;
    for (t, &x) in trits.iter_mut().zip(w) {
        let c = x - mu;
        *t = if c > delta {
            1
        } else if c < -delta {
            -1
        } else {
            0
        };
        if *t != 0 {
            num += f64::from(*t) * c;
            count += 1;
        }
    }
    let alpha = if count == 0 { 0.0 } else { num / count as f64 };
    (alpha, mu)
}

pub fn ternary_init(w: &DenseTensor) -> (TileGrid, TernaryMatrix) {
    let (n, g) = (w.rows(), w.cols());
    let mut trits = TernaryMatrix::zeros(n, g);
    let mut alpha = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    for i in 0..n {
        let (a, m) = init_row(w.row(i), trits.row_mut(i));
        alpha.push(a);
        mu.push(m);
    }
    (TileGrid { alpha, mu }, trits)
}

/// Least-squares grid for one row with the trits held fixed.
///
/// The normal equations are singular exactly when all trits in the row are
/// equal. Then `mu` becomes the row mean; `alpha` keeps `prev_alpha` if the
/// trits are all zero and becomes 0 otherwise.
pub fn grid_row(w: &[f64], t: &[i8], prev_alpha: f64) -> (f64, f64) {
    let g = w.len() as i64;
    let mut sum_t = 0i64;
    let mut sum_tt = 0i64;
    let mut sum_w = 0.0;
    let mut sum_wt = 0.0;
    for (&x, &ti) in w.iter().zip(t) {
        sum_t += i64::from(ti);
        sum_tt += i64::from(ti * ti);
        sum_w += x;
        sum_wt += x * f64::from(ti);
    }
    let den = g * sum_tt - sum_t * sum_t;
    if den == 0 {
        let alpha = if sum_tt == 0 { prev_alpha } else { 0.0 };
        return (alpha, sum_w / g as f64);
    }
    let den = den as f64;
    let alpha = (g as f64 * sum_wt - sum_t as f64 * sum_w) / den;
    let mu = (sum_tt as f64 * sum_w - sum_t as f64 * sum_wt) / den;
    (alpha, mu)
}

pub fn optimal_grid(w: &DenseTensor, trits: &TernaryMatrix, prev: Option<&TileGrid>) -> TileGrid {
    let n = w.rows();
    let mut alpha = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    for i in 0..n {
        let prev_alpha = prev.map_or(0.0, |p| p.alpha[i]);
        let (a, m) = grid_row(w.row(i), trits.row(i), prev_alpha);
        alpha.push(a);
        mu.push(m);
    }
    TileGrid { alpha, mu }
}

/// Nearest trit to `z`; exact ties at `|z| = 0.5` go to zero.
#[inline]
pub fn round_trit(z: f64) -> i8 {
    if z.abs() <= 0.5 {
        0
    } else if z > 0.0 {
        1
    } else {
        -1
    }
}

pub fn round_row(w: &[f64], alpha: f64, mu: f64, out: &mut [i8]) {
    if alpha == 0.0 {
        out.iter_mut().for_each(|t| *t = 0);
        return;
    }
    for (t, &x) in out.iter_mut().zip(w) {
        *t = round_trit((x - mu) / alpha);
    }
}

pub fn flexible_round(w: &DenseTensor, grid: &TileGrid) -> TernaryMatrix {
    let mut trits = TernaryMatrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        round_row(w.row(i), grid.alpha[i], grid.mu[i], trits.row_mut(i));
    }
    trits
}

pub fn row_weight_error(w: &[f64], alpha: f64, mu: f64, t: &[i8]) -> f64 {
    w.iter()
        .zip(t)
        .map(|(&x, &ti)| {
            let r = x - alpha * f64::from(ti) - mu;
            r * r
        })
        .sum()
}

pub fn tile_weight_error(w: &DenseTensor, grid: &TileGrid, trits: &TernaryMatrix) -> f64 {
    (0..w.rows())
        .map(|i| row_weight_error(w.row(i), grid.alpha[i], grid.mu[i], trits.row(i)))
        .sum()
}

/// Iterative ternary fitting from an initial grid and code plane.
pub fn itf(w: &DenseTensor, init: (TileGrid, TernaryMatrix), max_iters: usize) -> AtqState {
    let (mut grid, mut trits) = init;
    let n = w.rows();
    let mut row_err: Vec<f64> = (0..n)
        .map(|i| row_weight_error(w.row(i), grid.alpha[i], grid.mu[i], trits.row(i)))
        .collect();
    let mut trace = vec![row_err.iter().sum()];
    let mut done = vec![false; n];
    let mut next = vec![0i8; w.cols()];
    let mut iteration = 0;

    while iteration < max_iters && done.iter().any(|d| !d) {
        iteration += 1;
        for i in (0..n).filter(|&i| !done[i]) {
            let (a, m) = grid_row(w.row(i), trits.row(i), grid.alpha[i]);
            grid.alpha[i] = a;
            grid.mu[i] = m;
            row_err[i] = row_weight_error(w.row(i), a, m, trits.row(i));
        }
        trace.push(row_err.iter().sum());
        for i in 0..n {
            if done[i] {
                continue;
            }
            round_row(w.row(i), grid.alpha[i], grid.mu[i], &mut next);
            if next.as_slice() == trits.row(i) {
                done[i] = true;
            } else {
                trits.row_mut(i).copy_from_slice(&next);
                row_err[i] = row_weight_error(w.row(i), grid.alpha[i], grid.mu[i], trits.row(i));
            }
        }
        trace.push(row_err.iter().sum());
    }

    let converged = done.iter().all(|&d| d);
    if !converged {
        log::debug!("itf: {} of {n} rows unconverged after {max_iters} iterations", done.iter().filter(|d| !**d).count());
        // Re-fit the grid to the last code plane; never increases the error.
        for i in (0..n).filter(|&i| !done[i]) {
            let (a, m) = grid_row(w.row(i), trits.row(i), grid.alpha[i]);
            grid.alpha[i] = a;
            grid.mu[i] = m;
            row_err[i] = row_weight_error(w.row(i), a, m, trits.row(i));
        }
        trace.push(row_err.iter().sum());
    }

    AtqState {
        e_w: row_err.iter().sum(),
        grid,
        trits,
        iteration,
        converged,
        trace,
    }
}

/// Checks a `g x g` Gram tile for symmetry.
pub fn check_symmetric(gram: &[f64], g: usize) -> Result<()> {
    let scale = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..g {
        for j in i + 1..g {
            let diff = (gram[i * g + j] - gram[j * g + i]).abs();
            if diff > GRAM_SYMMETRY_TOL * scale {
                return Err(Error::GramNotSymmetric { i, j, diff });
            }
        }
    }
    Ok(())
}

/// Activation-weighted grid re-solve with the trits frozen.
///
/// Per row, minimizes `r C rᵀ` with `r = w - alpha t - mu 1` over
/// `(alpha, mu)`. Rows whose weighted normal equations are singular keep
/// their entry from `prev`.
pub fn aga_align(w: &DenseTensor, trits: &TernaryMatrix, gram: &[f64], prev: &TileGrid) -> Result<TileGrid> {
    let (n, g) = (w.rows(), w.cols());
    if gram.len() != g * g {
        return Err(Error::ShapeMismatch {
            expected: vec![g, g],
            actual: vec![gram.len()],
        });
    }
    check_symmetric(gram, g)?;

    let c1: Vec<f64> = (0..g).map(|j| gram[j * g..(j + 1) * g].iter().sum()).collect();
    let d: f64 = c1.iter().sum();
    let tf: Vec<f64> = trits.as_slice().iter().map(|&t| f64::from(t)).collect();
    // rows of T C
    let mut tc = vec![0.0; n * g];
    linalg::gemm(n, g, g, 1.0, &tf, gram, 0.0, &mut tc);

    let mut out = prev.clone();
    for i in 0..n {
        let wi = w.row(i);
        let ti = &tf[i * g..(i + 1) * g];
        let tci = &tc[i * g..(i + 1) * g];
        let a: f64 = ti.iter().zip(tci).map(|(x, y)| x * y).sum();
        let b: f64 = ti.iter().zip(&c1).map(|(x, y)| x * y).sum();
        let r1: f64 = wi.iter().zip(tci).map(|(x, y)| x * y).sum();
        let r2: f64 = wi.iter().zip(&c1).map(|(x, y)| x * y).sum();
        let ad = a * d;
        let det = ad - b * b;
        if !(ad > 0.0) || det <= SINGULAR_TOL * ad {
            continue;
        }
        out.alpha[i] = (d * r1 - b * r2) / det;
        out.mu[i] = (a * r2 - b * r1) / det;
    }
    Ok(out)
}

/// Activation-weighted error `sum_i r_i C r_iᵀ` of a tile.
pub fn tile_output_error(w: &DenseTensor, grid: &TileGrid, trits: &TernaryMatrix, gram: &[f64]) -> f64 {
    let (n, g) = (w.rows(), w.cols());
    let mut r = vec![0.0; n * g];
    for i in 0..n {
        for j in 0..g {
            r[i * g + j] = w.get(i, j) - grid.alpha[i] * f64::from(trits.get(i, j)) - grid.mu[i];
        }
    }
    quadratic_rows(&r, n, g, gram)
}

/// `sum_i r_i C r_iᵀ` for row-major residuals `r: n x g`.
pub fn quadratic_rows(r: &[f64], n: usize, g: usize, gram: &[f64]) -> f64 {
    let mut rc = vec![0.0; n * g];
    linalg::gemm(n, g, g, 1.0, r, gram, 0.0, &mut rc);
    r.iter().zip(&rc).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> DenseTensor {
        DenseTensor::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn init_symmetric_four_point_row() {
        let (grid, t) = ternary_init(&row(&[1.0, -1.0, 0.1, -0.1]));
        assert_eq!(grid.mu[0], 0.0);
        assert_eq!(t.row(0), &[1, -1, 0, 0]);
        assert_eq!(grid.alpha[0], 1.0);
    }

    #[test]
    fn init_constant_row() {
        let w = row(&[2.0; 4]);
        let (grid, t) = ternary_init(&w);
        assert_eq!((grid.alpha[0], grid.mu[0]), (0.0, 2.0));
        assert_eq!(t.row(0), &[0; 4]);
        assert_eq!(tile_weight_error(&w, &grid, &t), 0.0);
    }

    #[test]
    fn init_two_point_row() {
        for c in [0.3, 1.0, 17.5] {
            let w = row(&[c, -c]);
            let (grid, t) = ternary_init(&w);
            assert_eq!(grid.mu[0], 0.0);
            assert_eq!(t.row(0), &[1, -1]);
            assert_eq!(grid.alpha[0], c);
            assert_eq!(tile_weight_error(&w, &grid, &t), 0.0);
        }
    }

    #[test]
    fn grid_on_exact_row() {
        assert_eq!(grid_row(&[3.0, 1.0, -1.0], &[1, 0, -1], 0.0), (2.0, 1.0));
    }

    #[test]
    fn grid_fallbacks() {
        // all zero: alpha kept, mu = mean
        assert_eq!(grid_row(&[1.0, 2.0, 3.0], &[0, 0, 0], 0.7), (0.7, 2.0));
        // all equal nonzero: alpha = 0, mu = mean
        assert_eq!(grid_row(&[1.0, 2.0, 3.0], &[1, 1, 1], 0.7), (0.0, 2.0));
        let w = row(&[5.0; 3]);
        let grid = optimal_grid(&w, &TernaryMatrix::zeros(1, 3), None);
        assert_eq!(grid.mu[0], 5.0);
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(round_trit(0.6), 1);
        assert_eq!(round_trit(-0.45), 0);
        assert_eq!(round_trit(0.5), 0);
        assert_eq!(round_trit(-0.5), 0);
        assert_eq!(round_trit(-7.0), -1);
    }

    #[test]
    fn zero_alpha_rounds_to_zero() {
        let grid = TileGrid { alpha: vec![0.0], mu: vec![1.0] };
        assert_eq!(flexible_round(&row(&[5.0, -3.0]), &grid).row(0), &[0, 0]);
    }

    #[test]
    fn itf_exact_tile_is_fixed_point() {
        // rows built as alpha*t + mu with balanced trits
        let pattern = [1i8, 0, -1, 1, -1, 0, 0, 1, -1];
        let (alphas, mus) = ([0.5, 2.0, 1.25], [0.25, -1.0, 3.0]);
        let w = DenseTensor::from_fn(3, 9, |i, j| alphas[i] * f64::from(pattern[(j + i) % 9]) + mus[i]);
        let state = itf(&w, ternary_init(&w), DEFAULT_MAX_ITERS);
        assert!(state.converged);
        assert!(state.iteration <= 2, "took {}", state.iteration);
        assert!(state.e_w <= 1e-24, "{}", state.e_w);
    }

    #[test]
    fn itf_trace_monotone_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = DenseTensor::from_fn(4, 16, |_, _| rng.random_range(-1.0..1.0) + 0.3);
        let state = itf(&w, ternary_init(&w), DEFAULT_MAX_ITERS);
        for pair in state.trace.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{pair:?}");
        }
        let recomputed = state.recompute_error(&w);
        assert!((recomputed - state.e_w).abs() <= 1e-12 * recomputed.max(1e-300));
        assert!(state.iteration <= DEFAULT_MAX_ITERS);
    }

    #[test]
    fn itf_reports_nonconvergence_without_failing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = DenseTensor::from_fn(8, 64, |_, _| rng.random_range(-1.0..1.0f64).powi(3));
        let state = itf(&w, ternary_init(&w), 1);
        assert_eq!(state.iteration, 1);
        // one iteration is rarely enough for every row of a skewed tile
        if !state.converged {
            let recomputed = state.recompute_error(&w);
            assert!((recomputed - state.e_w).abs() <= 1e-12 * recomputed);
        }
    }

    #[test]
    fn aga_isotropic_equals_optimal_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = DenseTensor::from_fn(6, 10, |_, _| rng.random_range(-1.0..1.0));
        let state = itf(&w, ternary_init(&w), DEFAULT_MAX_ITERS);
        let mut gram = vec![0.0; 100];
        for j in 0..10 {
            gram[j * 10 + j] = 3.5;
        }
        let aga = aga_align(&w, &state.trits, &gram, &state.grid).unwrap();
        let plain = optimal_grid(&w, &state.trits, None);
        for i in 0..6 {
            if state.trits.row(i).iter().all(|&t| t == state.trits.get(i, 0)) {
                continue;
            }
            assert!((aga.alpha[i] - plain.alpha[i]).abs() <= 1e-12 * plain.alpha[i].abs().max(1.0));
            assert!((aga.mu[i] - plain.mu[i]).abs() <= 1e-12 * plain.mu[i].abs().max(1.0));
        }
    }

    #[test]
    fn aga_zero_gram_keeps_prior() {
        let w = row(&[1.0, -1.0, 0.2]);
        let (grid, t) = ternary_init(&w);
        let out = aga_align(&w, &t, &[0.0; 9], &grid).unwrap();
        assert_eq!(out, grid);
    }

    #[test]
    fn aga_rejects_asymmetric_gram() {
        let w = row(&[1.0, -1.0]);
        let (grid, t) = ternary_init(&w);
        let err = aga_align(&w, &t, &[1.0, 0.5, 0.0, 1.0], &grid).unwrap_err();
        assert!(matches!(err, Error::GramNotSymmetric { .. }));
    }

    #[test]
    fn aga_never_touches_trits_and_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (n, g, s) = (5, 12, 40);
        let w = DenseTensor::from_fn(n, g, |_, _| rng.random_range(-1.0..1.0));
        let x: Vec<f64> = (0..s * g).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut gram = vec![0.0; g * g];
        linalg::gram(s, g, &x, 0.0, &mut gram);
        let state = itf(&w, ternary_init(&w), DEFAULT_MAX_ITERS);
        let before_trits = state.trits.clone();
        let aga = aga_align(&w, &state.trits, &gram, &state.grid).unwrap();
        assert_eq!(state.trits, before_trits);
        let e0 = tile_output_error(&w, &state.grid, &state.trits, &gram);
        let e1 = tile_output_error(&w, &aga, &state.trits, &gram);
        assert!(e1 <= e0 * (1.0 + 1e-9));
    }
}
