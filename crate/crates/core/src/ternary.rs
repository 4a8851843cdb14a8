//! Ternary code planes, per-group grid parameters, base-3 packing and
//! dequantization.
//!
//! A packed tensor stores trits in *quantized* column order: column `j` of the
//! code plane belongs to group `j / group_size` and maps back to original
//! column `permutation[j]`.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Trits per packed byte.
pub const TRITS_PER_BYTE: usize = 5;
/// Largest valid packed byte, `3^5 - 1`.
pub const MAX_TRIT_BYTE: u8 = 242;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryMatrix {
    rows: usize,
    cols: usize,
    trits: Vec<i8>,
}

impl TernaryMatrix {
    pub fn new(rows: usize, cols: usize, trits: Vec<i8>) -> Result<Self> {
        if trits.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, cols],
                actual: vec![trits.len()],
            });
        }
        if let Some((index, &value)) = trits.iter().enumerate().find(|(_, t)| !(-1..=1).contains(*t)) {
            return Err(Error::InvalidTrit { index, value });
        }
        Ok(Self { rows, cols, trits })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            trits: vec![0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.trits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.trits[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.trits[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [i8] {
        &mut self.trits[i * self.cols..(i + 1) * self.cols]
    }
}

/// Storage precision of the per-group scale and offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleDtype {
    #[default]
    F32,
    F16,
}

impl ScaleDtype {
    pub fn tag(self) -> u8 {
        match self {
            ScaleDtype::F32 => 0,
            ScaleDtype::F16 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ScaleDtype::F32),
            1 => Ok(ScaleDtype::F16),
            other => Err(Error::UnknownScaleDtype(other)),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            ScaleDtype::F32 => 4,
            ScaleDtype::F16 => 2,
        }
    }

    /// Rounds a working-precision value to what this dtype stores.
    pub fn round(self, v: f64) -> f32 {
        match self {
            ScaleDtype::F32 => v as f32,
            ScaleDtype::F16 => f16::from_f64(v).to_f32(),
        }
    }
}

/// Per-(row, group) scale `alpha` and offset `mu`; the grid is `{mu - alpha, mu, mu + alpha}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridParams {
    rows: usize,
    groups: usize,
    alpha: Vec<f32>,
    mu: Vec<f32>,
}

impl GridParams {
    pub fn new(rows: usize, groups: usize, alpha: Vec<f32>, mu: Vec<f32>) -> Result<Self> {
        if alpha.len() != rows * groups || mu.len() != rows * groups {
            return Err(Error::InvalidGrid(format!(
                "expected {} entries, got alpha={} mu={}",
                rows * groups,
                alpha.len(),
                mu.len()
            )));
        }
        if let Some(i) = alpha.iter().position(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "alpha[{i}] = {} must be finite and non-negative",
                alpha[i]
            )));
        }
        if let Some(i) = mu.iter().position(|m| !m.is_finite()) {
            return Err(Error::InvalidGrid(format!("mu[{i}] is not finite")));
        }
        Ok(Self {
            rows,
            groups,
            alpha,
            mu,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    #[inline]
    pub fn alpha(&self, row: usize, group: usize) -> f32 {
        self.alpha[row * self.groups + group]
    }

    #[inline]
    pub fn mu(&self, row: usize, group: usize) -> f32 {
        self.mu[row * self.groups + group]
    }

    pub fn alphas(&self) -> &[f32] {
        &self.alpha
    }

    pub fn mus(&self) -> &[f32] {
        &self.mu
    }
}

/// Dequantized value of one trit. Every producer and consumer of `W_hat`
/// goes through this so the arithmetic is identical everywhere.
#[inline]
pub fn grid_value(alpha: f32, mu: f32, trit: i8) -> f64 {
    f64::from(alpha) * f64::from(trit) + f64::from(mu)
}

/// Brings one (row, group) into canonical form: `alpha >= 0`, and `alpha == 0`
/// exactly when every trit is zero. Dequantized values are unchanged.
pub fn canonicalize_group(alpha: &mut f64, trits: &mut [i8]) {
    if *alpha < 0.0 {
        *alpha = -*alpha;
        trits.iter_mut().for_each(|t| *t = -*t);
    }
    if *alpha == 0.0 {
        trits.iter_mut().for_each(|t| *t = 0);
    } else if trits.iter().all(|&t| t == 0) {
        *alpha = 0.0;
    }
}

pub fn n_groups(cols: usize, group_size: usize) -> usize {
    cols.div_ceil(group_size)
}

pub fn packed_len(n_trits: usize) -> usize {
    n_trits.div_ceil(TRITS_PER_BYTE)
}

/// Packs a trit matrix row-major, five trits per byte, first trit in the
/// least significant base-3 digit. Digits are `trit + 1`.
pub fn pack_trits(t: &TernaryMatrix) -> Vec<u8> {
    t.as_slice()
        .chunks(TRITS_PER_BYTE)
        .map(|chunk| {
            chunk
                .iter()
                .rev()
                .fold(0u8, |acc, &trit| acc * 3 + (trit + 1) as u8)
        })
        .collect()
}

pub fn unpack_trits(payload: &[u8], rows: usize, cols: usize) -> Result<TernaryMatrix> {
    let n = rows * cols;
    let expected = packed_len(n);
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::TrailingBytes {
            expected,
            actual: payload.len(),
        });
    }
    let mut trits = Vec::with_capacity(expected * TRITS_PER_BYTE);
    for (offset, &byte) in payload.iter().enumerate() {
        if byte > MAX_TRIT_BYTE {
            return Err(Error::InvalidTritByte {
                offset,
                value: byte,
            });
        }
        let mut b = byte;
        for _ in 0..TRITS_PER_BYTE {
            trits.push((b % 3) as i8 - 1);
            b /= 3;
        }
    }
    trits.truncate(n);
    Ok(TernaryMatrix { rows, cols, trits })
}

/// Quantized layer in storage form.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTernaryTensor {
    rows: usize,
    cols: usize,
    group_size: usize,
    scale_dtype: ScaleDtype,
    permutation: Vec<u32>,
    grid: GridParams,
    payload: Vec<u8>,
}

impl PackedTernaryTensor {
    /// Builds a packed tensor from a code plane in quantized column order.
    pub fn from_trits(
        trits: &TernaryMatrix,
        grid: GridParams,
        permutation: Vec<u32>,
        group_size: usize,
        scale_dtype: ScaleDtype,
    ) -> Result<Self> {
        Self::from_parts(
            trits.rows(),
            trits.cols(),
            group_size,
            scale_dtype,
            permutation,
            grid,
            pack_trits(trits),
        )
    }

    /// Assembles and validates every invariant of the packed form.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        group_size: usize,
        scale_dtype: ScaleDtype,
        permutation: Vec<u32>,
        grid: GridParams,
        payload: Vec<u8>,
    ) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::Config("group size must be at least 1".into()));
        }
        if !is_bijection(&permutation, cols) {
            return Err(Error::BadPermutation(cols));
        }
        let groups = n_groups(cols, group_size);
        if grid.rows() != rows || grid.groups() != groups {
            return Err(Error::InvalidGrid(format!(
                "grid is {}x{}, expected {rows}x{groups}",
                grid.rows(),
                grid.groups()
            )));
        }
        if let Some(i) = grid
            .alphas()
            .iter()
            .chain(grid.mus())
            .position(|&v| scale_dtype.round(f64::from(v)) != v)
        {
            return Err(Error::InvalidGrid(format!(
                "grid value {i} not representable in {scale_dtype:?}"
            )));
        }
        // Validates length and byte range.
        unpack_trits(&payload, rows, cols)?;
        Ok(Self {
            rows,
            cols,
            group_size,
            scale_dtype,
            permutation,
            grid,
            payload,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups(&self) -> usize {
        self.grid.groups()
    }

    pub fn scale_dtype(&self) -> ScaleDtype {
        self.scale_dtype
    }

    pub fn permutation(&self) -> &[u32] {
        &self.permutation
    }

    pub fn grid(&self) -> &GridParams {
        &self.grid
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Code plane in quantized column order.
    pub fn trits(&self) -> TernaryMatrix {
        unpack_trits(&self.payload, self.rows, self.cols).expect("validated on construction")
    }

    /// Bits per weight spent on the trit section alone.
    pub fn trit_bits_per_weight(&self) -> f64 {
        8.0 * self.payload.len() as f64 / (self.rows * self.cols) as f64
    }
}

fn is_bijection(perm: &[u32], m: usize) -> bool {
    if perm.len() != m {
        return false;
    }
    let mut seen = vec![false; m];
    for &p in perm {
        let p = p as usize;
        if p >= m || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Reconstructs `W_hat` in original column order.
pub fn dequantize(packed: &PackedTernaryTensor) -> DenseTensor {
    let trits = packed.trits();
    let k = packed.group_size;
    let mut out = DenseTensor::zeros(packed.rows, packed.cols);
    for i in 0..packed.rows {
        let trow = trits.row(i);
        let orow = out.row_mut(i);
        for (j, (&t, &dest)) in trow.iter().zip(&packed.permutation).enumerate() {
            let g = j / k;
            orow[dest as usize] = grid_value(packed.grid.alpha(i, g), packed.grid.mu(i, g), t);
        }
    }
    out
}

/// Squared Frobenius norm of `w - w_hat`.
pub fn weight_error(w: &DenseTensor, w_hat: &DenseTensor) -> Result<f64> {
    if w.shape() != w_hat.shape() {
        return Err(Error::ShapeMismatch {
            expected: w.shape().to_vec(),
            actual: w_hat.shape().to_vec(),
        });
    }
    Ok(w
        .data()
        .iter()
        .zip(w_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}
