use crate::error::{Error, Result};
use crate::linalg;
use crate::tensorio::CalibBatch;

/// Accumulated activation Gram `sum_s x_sᵀ x_s` over calibration samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibGram {
    dim: usize,
    gram: Vec<f64>,
    count: usize,
    identity_fallback: bool,
}

impl CalibGram {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            gram: vec![0.0; dim * dim],
            count: 0,
            identity_fallback: false,
        }
    }

    /// Stand-in when a layer has no calibration data: weights every output
    /// direction equally, which turns the activation error into the weight error.
    pub fn identity(dim: usize) -> Self {
        let mut gram = vec![0.0; dim * dim];
        for i in 0..dim {
            gram[i * dim + i] = 1.0;
        }
        Self {
            dim,
            gram,
            count: 0,
            identity_fallback: true,
        }
    }

    pub fn from_matrix(dim: usize, gram: Vec<f64>, count: usize) -> Result<Self> {
        if gram.len() != dim * dim {
            return Err(Error::ShapeMismatch {
                expected: vec![dim, dim],
                actual: vec![gram.len()],
            });
        }
        Ok(Self {
            dim,
            gram,
            count,
            identity_fallback: false,
        })
    }

    pub fn from_batch(batch: &CalibBatch) -> Self {
        let mut g = Self::new(batch.features());
        g.accumulate(batch).expect("dimension taken from batch");
        g
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_identity_fallback(&self) -> bool {
        self.identity_fallback
    }

    pub fn matrix(&self) -> &[f64] {
        &self.gram
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.dim + j]
    }

    /// Sub-block `C[idx, idx]`.
    pub fn submatrix(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * idx.len());
        for &i in idx {
            let row = &self.gram[i * self.dim..(i + 1) * self.dim];
            out.extend(idx.iter().map(|&j| row[j]));
        }
        out
    }

    /// Adds `XᵀX` of the batch. The batch product is formed separately and
    /// then added, so equal batches contribute bit-identical increments.
    pub fn accumulate(&mut self, batch: &CalibBatch) -> Result<()> {
        if batch.features() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: vec![batch.samples(), self.dim],
                actual: vec![batch.samples(), batch.features()],
            });
        }
        let m = self.dim;
        let mut inc = vec![0.0; m * m];
        linalg::gram(batch.samples(), m, batch.as_tensor().data(), 0.0, &mut inc);
        linalg::symmetrize(&mut inc, m);
        if self.identity_fallback {
            self.gram.iter_mut().for_each(|v| *v = 0.0);
            self.identity_fallback = false;
        }
        self.gram.iter_mut().zip(&inc).for_each(|(g, d)| *g += d);
        self.count += batch.samples();
        Ok(())
    }
}

/// Functional form of [`CalibGram::accumulate`].
pub fn accumulate_gram(mut state: CalibGram, batch: &CalibBatch) -> Result<CalibGram> {
    state.accumulate(batch)?;
    Ok(state)
}
