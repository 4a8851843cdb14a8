#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

use pt2t::{CalibBatch, DenseTensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DenseTensor {
    DenseTensor::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Gaussian rows with a per-row offset in [-1, 1].
pub fn offset_gaussian(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DenseTensor {
    let offsets: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseTensor::from_fn(n, m, |i, _| offsets[i] + rng.sample::<f64, _>(StandardNormal))
}

/// Student-t activations with per-feature scales.
pub fn heavy_tailed(rng: &mut ChaCha8Rng, s: usize, m: usize) -> CalibBatch {
    let t = StudentT::new(3.0).unwrap();
    let scale: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..3.0)).collect();
    let data = (0..s * m).map(|idx| scale[idx % m] * t.sample(rng)).collect();
    CalibBatch::new(s, m, data).unwrap()
}

pub fn mixed_trits(rng: &mut ChaCha8Rng, g: usize) -> Vec<i8> {
    loop {
        let t: Vec<i8> = (0..g).map(|_| rng.random_range(-1..=1)).collect();
        if t.iter().any(|&x| x != t[0]) {
            return t;
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// Solves the unweighted least-squares fit `w ≈ alpha t + mu` with a dense
/// solver on the 2x2 normal equations.
pub fn lsq_grid_oracle(w: &[f64], t: &[i8]) -> (f64, f64) {
    let g = w.len();
    let a = DMatrix::from_fn(g, 2, |j, c| if c == 0 { f64::from(t[j]) } else { 1.0 });
    let y = DMatrix::from_column_slice(g, 1, w);
    let at = a.transpose();
    let x = (&at * &a).lu().solve(&(&at * y)).expect("nonsingular");
    (x[0], x[1])
}

/// Weighted least squares under the PSD weight `c` (row-major `g x g`):
/// whiten with an eigen square root, then solve by SVD.
pub fn wls_grid_oracle(w: &[f64], t: &[i8], c: &[f64]) -> (f64, f64) {
    let g = w.len();
    let cm = DMatrix::from_row_slice(g, g, c);
    let eig = cm.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    let a = DMatrix::from_fn(g, 2, |j, col| if col == 0 { f64::from(t[j]) } else { 1.0 });
    let y = DMatrix::from_column_slice(g, 1, w);
    let x = (&root * a).svd(true, true).solve(&(&root * y), 1e-14).expect("svd solve");
    (x[0], x[1])
}

/// Output of [`reference_quantize`], in quantized column order.
#[derive(Debug, PartialEq)]
pub struct RefLayer {
    pub trits: Vec<Vec<i8>>,
    pub alpha: Vec<Vec<f32>>,
    pub mu: Vec<Vec<f32>>,
    pub perm: Vec<usize>,
}

/// Plain re-statement of the full layer loop with every option on and f32
/// scales: similarity-ordered blocks, threshold init, alternating fit,
/// weighted re-solve, and compensation through a freshly inverted Hessian
/// of the remaining columns at every block.
pub fn reference_quantize(w: &DenseTensor, c: &[f64], k: usize, lambda_frac: f64) -> RefLayer {
    let (n, m) = (w.rows(), w.cols());
    let mut resid: Vec<Vec<f64>> = (0..n).map(|i| w.row(i).to_vec()).collect();

    let mean_diag = (0..m).map(|j| c[j * m + j]).sum::<f64>() / m as f64;
    let lambda = if mean_diag > 0.0 { lambda_frac * mean_diag } else { lambda_frac };
    let h = |i: usize, j: usize| c[i * m + j] + if i == j { lambda } else { 0.0 };

    let mut remaining: Vec<usize> = (0..m).collect();
    let mut out = RefLayer {
        trits: vec![Vec::new(); n],
        alpha: vec![Vec::new(); n],
        mu: vec![Vec::new(); n],
        perm: Vec::new(),
    };

    while !remaining.is_empty() {
        // block selection
        let block: Vec<usize> = if remaining.len() <= k {
            remaining.clone()
        } else {
            let r = remaining.len() as f64;
            let mean: Vec<f64> = (0..n).map(|i| remaining.iter().map(|&j| resid[i][j]).sum::<f64>() / r).collect();
            let mnorm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut pick = if mnorm == 0.0 {
                remaining[..k].to_vec()
            } else {
                let mut scored: Vec<(f64, usize)> = remaining
                    .iter()
                    .map(|&j| {
                        let mut dot = 0.0;
                        let mut sq = 0.0;
                        for i in 0..n {
                            dot += resid[i][j] * mean[i];
                            sq += resid[i][j] * resid[i][j];
                        }
                        let s = if sq == 0.0 { 0.0 } else { dot / (sq.sqrt() * mnorm) };
                        (s, j)
                    })
                    .collect();
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                scored[..k].iter().map(|p| p.1).collect()
            };
            pick.sort();
            pick
        };
        let g = block.len();

        let mut codes: Vec<Vec<i8>> = Vec::with_capacity(n);
        let mut grid: Vec<(f64, f64)> = Vec::with_capacity(n);
        for i in 0..n {
            let x: Vec<f64> = block.iter().map(|&j| resid[i][j]).collect();

            // threshold init
            let mu0 = x.iter().sum::<f64>() / g as f64;
            let delta = 0.75 * x.iter().map(|v| (v - mu0).abs()).sum::<f64>() / g as f64;
            let mut t: Vec<i8> = x
                .iter()
                .map(|v| {
                    if v - mu0 > delta {
                        1
                    } else if v - mu0 < -delta {
                        -1
                    } else {
                        0
                    }
                })
                .collect();
            let nz = t.iter().filter(|&&v| v != 0).count();
            let mut alpha = if nz == 0 {
                0.0
            } else {
                x.iter().zip(&t).map(|(v, &s)| f64::from(s) * (v - mu0)).sum::<f64>() / nz as f64
            };
            let mut mu;

            // alternating fit
            let fit = |t: &[i8], prev: f64| -> (f64, f64) {
                let st: i64 = t.iter().map(|&v| i64::from(v)).sum();
                let stt: i64 = t.iter().map(|&v| i64::from(v * v)).sum();
                let sw: f64 = x.iter().sum();
                let swt: f64 = x.iter().zip(t).map(|(v, &s)| v * f64::from(s)).sum();
                let den = g as i64 * stt - st * st;
                if den == 0 {
                    return (if stt == 0 { prev } else { 0.0 }, sw / g as f64);
                }
                let den = den as f64;
                (
                    (g as f64 * swt - st as f64 * sw) / den,
                    (stt as f64 * sw - st as f64 * swt) / den,
                )
            };
            let round = |a: f64, u: f64| -> Vec<i8> {
                x.iter()
                    .map(|v| {
                        if a == 0.0 {
                            return 0;
                        }
                        let z = (v - u) / a;
                        if z.abs() <= 0.5 {
                            0
                        } else if z > 0.0 {
                            1
                        } else {
                            -1
                        }
                    })
                    .collect()
            };
            let mut converged = false;
            (alpha, mu) = fit(&t, alpha);
            for _ in 1..=50 {
                let next = round(alpha, mu);
                if next == t {
                    converged = true;
                    break;
                }
                t = next;
                (alpha, mu) = fit(&t, alpha);
            }
            if !converged {
                (alpha, mu) = fit(&t, alpha);
            }

            // weighted re-solve
            let cb = |a: usize, b: usize| c[block[a] * m + block[b]];
            let (mut qa, mut qb, mut qd, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for p in 0..g {
                for q in 0..g {
                    let cpq = cb(p, q);
                    let (tp, tq) = (f64::from(t[p]), f64::from(t[q]));
                    qa += tp * cpq * tq;
                    qb += tp * cpq;
                    qd += cpq;
                    r1 += x[p] * cpq * tq;
                    r2 += x[p] * cpq;
                }
            }
            let ad = qa * qd;
            let det = ad - qb * qb;
            if ad > 0.0 && det > 1e-12 * ad {
                alpha = (qd * r1 - qb * r2) / det;
                mu = (qa * r2 - qb * r1) / det;
            }

            // canonical form, then storage precision
            if alpha < 0.0 {
                alpha = -alpha;
                t.iter_mut().for_each(|v| *v = -*v);
            }
            if alpha == 0.0 || t.iter().all(|&v| v == 0) {
                alpha = 0.0;
                t.iter_mut().for_each(|v| *v = 0);
            }
            let a32 = alpha as f32;
            if a32 == 0.0 {
                t.iter_mut().for_each(|v| *v = 0);
            }
            grid.push((f64::from(a32), f64::from(mu as f32)));
            out.alpha[i].push(a32);
            out.mu[i].push(mu as f32);
            codes.push(t);
        }

        let rest: Vec<usize> = remaining.iter().copied().filter(|j| !block.contains(j)).collect();
        if !rest.is_empty() {
            let all: Vec<usize> = block.iter().chain(&rest).copied().collect();
            let hr = DMatrix::from_fn(all.len(), all.len(), |a, b| h(all[a], all[b]));
            let hinv = hr.try_inverse().expect("damped Hessian is invertible");
            let hbb = hinv.view((0, 0), (g, g)).into_owned();
            let hbr = hinv.view((0, g), (g, rest.len())).into_owned();
            let coef = hbb.try_inverse().expect("block of an SPD inverse") * hbr;
            for i in 0..n {
                let err: Vec<f64> = (0..g)
                    .map(|p| resid[i][block[p]] - (grid[i].0 * f64::from(codes[i][p]) + grid[i].1))
                    .collect();
                for (q, &j) in rest.iter().enumerate() {
                    let upd: f64 = (0..g).map(|p| err[p] * coef[(p, q)]).sum();
                    resid[i][j] -= upd;
                }
            }
        }

        for i in 0..n {
            out.trits[i].extend_from_slice(&codes[i]);
        }
        out.perm.extend_from_slice(&block);
        remaining = rest;
    }
    out
}
