//! Similarity-driven column ordering.
//!
//! Blocks are chosen greedily from the current residual: the next block is
//! the `k` remaining columns whose direction best matches the mean of all
//! remaining columns. Nothing here is random, so orders are reproducible.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Quantization order built up block by block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationTrace {
    order: Vec<usize>,
    taken: Vec<bool>,
}

impl PermutationTrace {
    pub fn new(m: usize) -> Self {
        Self {
            order: Vec::with_capacity(m),
            taken: vec![false; m],
        }
    }

    pub fn identity(m: usize) -> Self {
        Self {
            order: (0..m).collect(),
            taken: vec![true; m],
        }
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut trace = Self::new(order.len());
        trace.extend(&order)?;
        Ok(trace)
    }

    pub fn extend(&mut self, block: &[usize]) -> Result<()> {
        let m = self.taken.len();
        for &c in block {
            if c >= m || self.taken[c] {
                return Err(Error::BadPermutation(m));
            }
            self.taken[c] = true;
            self.order.push(c);
        }
        Ok(())
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn is_complete(&self) -> bool {
        self.order.len() == self.taken.len()
    }

    /// Original column -> position in quantization order, once complete.
    pub fn inverse(&self) -> Option<Vec<usize>> {
        if !self.is_complete() {
            return None;
        }
        let mut inv = vec![0; self.order.len()];
        for (pos, &c) in self.order.iter().enumerate() {
            inv[c] = pos;
        }
        Some(inv)
    }
}

fn column_norms(w: &DenseTensor) -> Vec<f64> {
    let mut sq = vec![0.0; w.cols()];
    for i in 0..w.rows() {
        for (s, &v) in sq.iter_mut().zip(w.row(i)) {
            *s += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Pairwise cosine similarity between columns (`m x m`). Zero columns have
/// similarity 0 with everything, including themselves.
pub fn cosine_similarity_matrix(w: &DenseTensor) -> DenseTensor {
    let m = w.cols();
    let norms = column_norms(w);
    let mut dots = vec![0.0; m * m];
    crate::linalg::gram(w.rows(), m, w.data(), 0.0, &mut dots);
    DenseTensor::from_fn(m, m, |i, j| {
        let d = norms[i] * norms[j];
        if d == 0.0 {
            0.0
        } else {
            dots[i.min(j) * m + i.max(j)] / d
        }
    })
}

/// Cosine similarity of each `remaining` column of `w` to their mean.
/// `None` when the mean is the zero vector.
pub fn similarity_to_mean(w: &DenseTensor, remaining: &[usize]) -> Option<Vec<f64>> {
    let r = remaining.len() as f64;
    let mean: Vec<f64> = (0..w.rows())
        .map(|i| {
            let row = w.row(i);
            remaining.iter().map(|&j| row[j]).sum::<f64>() / r
        })
        .collect();
    let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if mean_norm == 0.0 {
        return None;
    }
    let mut dot = vec![0.0; remaining.len()];
    let mut sq = vec![0.0; remaining.len()];
    for (i, &mi) in mean.iter().enumerate() {
        let row = w.row(i);
        for (idx, &j) in remaining.iter().enumerate() {
            let v = row[j];
            dot[idx] += v * mi;
            sq[idx] += v * v;
        }
    }
    Some(
        dot.iter()
            .zip(&sq)
            .map(|(&d, &s)| if s == 0.0 { 0.0 } else { d / (s.sqrt() * mean_norm) })
            .collect(),
    )
}

/// Picks the next block of at most `k` columns out of `remaining` (original
/// indices into `w`). The result is sorted ascending.
pub fn select_next_block(w: &DenseTensor, remaining: &[usize], k: usize) -> Vec<usize> {
    let k = k.min(remaining.len());
    let mut sorted: Vec<usize> = remaining.to_vec();
    sorted.sort_unstable();
    if k == sorted.len() {
        return sorted;
    }
    let Some(sim) = similarity_to_mean(w, &sorted) else {
        sorted.truncate(k);
        return sorted;
    };
    let mut ranked: Vec<usize> = (0..sorted.len()).collect();
    ranked.sort_by(|&a, &b| {
        sim[b]
            .partial_cmp(&sim[a])
            .unwrap_or(Ordering::Equal)
            .then(sorted[a].cmp(&sorted[b]))
    });
    let mut block: Vec<usize> = ranked[..k].iter().map(|&p| sorted[p]).collect();
    block.sort_unstable();
    block
}

/// Variance of all entries in each consecutive `k`-column block under `order`.
pub fn block_variance_profile(w: &DenseTensor, order: &[usize], k: usize) -> Vec<f64> {
    order
        .chunks(k.max(1))
        .map(|cols| {
            let count = (w.rows() * cols.len()) as f64;
            let mut sum = 0.0;
            for i in 0..w.rows() {
                let row = w.row(i);
                sum += cols.iter().map(|&j| row[j]).sum::<f64>();
            }
            let mean = sum / count;
            let mut ss = 0.0;
            for i in 0..w.rows() {
                let row = w.row(i);
                ss += cols.iter().map(|&j| (row[j] - mean) * (row[j] - mean)).sum::<f64>();
            }
            ss / count
        })
        .collect()
}

pub fn write_variance_csv(path: &Path, profile: &[f64]) -> Result<()> {
    let mut out = String::from("block_index,variance\n");
    for (b, v) in profile.iter().enumerate() {
        out.push_str(&format!("{b},{v:e}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
