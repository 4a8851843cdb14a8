//! Small dense kernels on row-major `f64` buffers.

use crate::error::{Error, Result};

/// `c = alpha * a * b + beta * c` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slices are sized for the declared row-major shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = alpha * aᵀ b + beta * c` for row-major `a: k x m`, `b: k x n`, `c: m x n`.
pub fn gemm_tn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: aᵀ is a viewed with swapped strides; shapes match the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = aᵀ a` for row-major `a: rows x cols`; `c` is `cols x cols`.
pub fn gram(rows: usize, cols: usize, a: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= rows * cols && c.len() >= cols * cols);
    if cols == 0 {
        return;
    }
    // SAFETY: aᵀ is a viewed with swapped strides; shapes match the buffers.
    unsafe {
        matrixmultiply::dgemm(
            cols,
            rows,
            cols,
            1.0,
            a.as_ptr(),
            1,
            cols as isize,
            a.as_ptr(),
            cols as isize,
            1,
            beta,
            c.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
}

/// In-place lower Cholesky factor `a = L Lᵀ`; the strict upper triangle is zeroed.
pub fn cholesky_lower(a: &mut [f64], n: usize) -> Result<()> {
    for i in 0..n {
        for j in 0..=i {
            let (head, tail) = a.split_at_mut(i * n);
            let row_i = &tail[..n];
            let row_j = if j == i { row_i } else { &head[j * n..j * n + n] };
            let dot: f64 = row_i[..j].iter().zip(&row_j[..j]).map(|(x, y)| x * y).sum();
            let s = row_i[j] - dot;
            if j == i {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Factorization { pivot: i });
                }
                tail[i] = s.sqrt();
            } else {
                let d = head[j * n + j];
                tail[j] = s / d;
            }
        }
        a[i * n + i + 1..(i + 1) * n].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

/// Inverse of a lower-triangular matrix, row by row.
pub fn lower_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n * n];
    for i in 0..n {
        let (done, rest) = x.split_at_mut(i * n);
        let xi = &mut rest[..n];
        for p in 0..i {
            let c = l[i * n + p];
            if c != 0.0 {
                let xp = &done[p * n..p * n + p + 1];
                xi[..=p].iter_mut().zip(xp).for_each(|(v, w)| *v -= c * w);
            }
        }
        xi[i] += 1.0;
        let d = l[i * n + i];
        xi[..=i].iter_mut().for_each(|v| *v /= d);
    }
    x
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = a.to_vec();
    cholesky_lower(&mut l, n)?;
    let linv = lower_inverse(&l, n);
    let mut out = vec![0.0; n * n];
    // a⁻¹ = L⁻ᵀ L⁻¹
    gram(n, n, &linv, 0.0, &mut out);
    symmetrize(&mut out, n);
    Ok(out)
}

/// Mirrors the lower triangle onto the upper one.
pub fn symmetrize(a: &mut [f64], n: usize) {
    for i in 0..n {
        for j in 0..i {
            a[j * n + i] = a[i * n + j];
        }
    }
}

/// Upper factor `U` with `a = Uᵀ U`.
pub fn cholesky_upper(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = a.to_vec();
    cholesky_lower(&mut l, n)?;
    Ok(transpose(&l, n, n))
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Solves `A X = B` in place given the lower Cholesky factor of `A`;
/// `b` is `n x ncols` row-major.
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], ncols: usize) {
    // forward: L Y = B
    for i in 0..n {
        let (done, rest) = b.split_at_mut(i * ncols);
        let bi = &mut rest[..ncols];
        for p in 0..i {
            let c = l[i * n + p];
            if c != 0.0 {
                bi.iter_mut().zip(&done[p * ncols..(p + 1) * ncols]).for_each(|(v, w)| *v -= c * w);
            }
        }
        let d = l[i * n + i];
        bi.iter_mut().for_each(|v| *v /= d);
    }
    // backward: Lᵀ X = Y
    for i in (0..n).rev() {
        let (head, tail) = b.split_at_mut((i + 1) * ncols);
        let bi = &mut head[i * ncols..];
        for p in i + 1..n {
            let c = l[p * n + i];
            if c != 0.0 {
                let bp = &tail[(p - i - 1) * ncols..(p - i) * ncols];
                bi.iter_mut().zip(bp).for_each(|(v, w)| *v -= c * w);
            }
        }
        let d = l[i * n + i];
        bi.iter_mut().for_each(|v| *v /= d);
    }
}
