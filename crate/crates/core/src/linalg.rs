//! Dense matrix primitives.
//!
//! Row-major `f64` storage, `data[i * cols + j] = A[i, j]`. Everything here is
//! a pure function of its inputs: Householder QR, cyclic Jacobi for symmetric
//! eigenvalues, one-sided Jacobi for singular values, and power iteration for
//! the spectral norm (with a matrix-free variant for operators that are never
//! materialized, such as convolutions).

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Validates shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidData {
                shape: vec![rows, cols],
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![self.rows, self.cols],
                rhs: vec![rhs.rows, rhs.cols],
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, b) in dst.iter_mut().zip(rhs.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Row vector times matrix, `x A`.
    pub fn left_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (k, &a) in x.iter().enumerate() {
            for (d, b) in out.iter_mut().zip(self.row(k)) {
                *d += a * b;
            }
        }
        out
    }

    /// Matrix times column vector, `A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: vec![self.rows, self.cols],
                rhs: vec![rhs.rows, rhs.cols],
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// `||A^T A - I||_F`, zero for matrices with orthonormal columns.
    pub fn orthogonality_defect(&self) -> f64 {
        let gram = self.transpose().matmul(self).expect("A^T A is always defined");
        let eye = Self::identity(self.cols);
        frobenius_norm(&gram.sub(&eye).expect("same shape"))
    }

    fn ensure_square(&self) -> Result<()> {
        if self.is_square() {
            Ok(())
        } else {
            Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            })
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn frobenius_norm(a: &DenseMatrix) -> f64 {
    l2_norm(a.data())
}

/// Householder QR of a square matrix with the sign convention `R[i][i] >= 0`.
///
/// Rank-deficient inputs are fine; a zero column below the diagonal is left
/// untouched.
pub fn qr_decompose(a: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    a.ensure_square()?;
    let n = a.rows;
    let mut r = a.clone();
    let mut q = DenseMatrix::identity(n);
    let mut v = vec![0.0; n];

    for k in 0..n.saturating_sub(1) {
        let norm = (k..n).map(|i| r.get(i, k).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r.get(k, k) > 0.0 { -norm } else { norm };
        let len = n - k;
        for i in 0..len {
            v[i] = r.get(k + i, k);
        }
        v[0] -= alpha;
        let vnorm2: f64 = v[..len].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;

        for j in k + 1..n {
            let s: f64 = (0..len).map(|i| v[i] * r.get(k + i, j)).sum();
            let f = beta * s;
            for i in 0..len {
                let cur = r.get(k + i, j);
                r.set(k + i, j, cur - f * v[i]);
            }
        }
        r.set(k, k, alpha);
        for i in k + 1..n {
            r.set(i, k, 0.0);
        }

        // Q <- Q H
        for row in 0..n {
            let s: f64 = (0..len).map(|i| q.get(row, k + i) * v[i]).sum();
            let f = beta * s;
            for i in 0..len {
                let cur = q.get(row, k + i);
                q.set(row, k + i, cur - f * v[i]);
            }
        }
    }

    for k in 0..n {
        if r.get(k, k) < 0.0 {
            for j in 0..n {
                r.set(k, j, -r.get(k, j));
                q.set(j, k, -q.get(j, k));
            }
        }
    }
    Ok((q, r))
}

const JACOBI_OFF_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix, sorted descending, via cyclic Jacobi.
pub fn eig_symmetric(a: &DenseMatrix) -> Result<Vec<f64>> {
    a.ensure_square()?;
    let n = a.rows;
    let norm = frobenius_norm(a);
    let asymmetry = frobenius_norm(&a.sub(&a.transpose())?);
    if asymmetry > 1e-12 * norm {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let mut m = a.clone();
    let threshold = JACOBI_OFF_TOL * norm.max(1.0);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = off_diagonal_norm(&m);
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
            }
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

fn off_diagonal_norm(m: &DenseMatrix) -> f64 {
    let n = m.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m.get(i, j).powi(2);
            }
        }
    }
    s.sqrt()
}

/// Singular values, sorted descending, via one-sided (Hestenes) Jacobi.
///
/// Returns `min(rows, cols)` values.
pub fn singular_values(a: &DenseMatrix) -> Vec<f64> {
    let work = if a.rows >= a.cols { a.clone() } else { a.transpose() };
    let (m, n) = work.shape();
    // column-major copy so rotations touch contiguous memory
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| work.get(i, j)).collect()).collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (left, right) = cols.split_at_mut(q);
                let up = &mut left[p];
                let uq = &mut right[0];
                let alpha: f64 = up.iter().map(|x| x * x).sum();
                let beta: f64 = uq.iter().map(|x| x * x).sum();
                let gamma: f64 = up.iter().zip(uq.iter()).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in up.iter_mut().zip(uq.iter_mut()) {
                    let a0 = *x;
                    let b0 = *y;
                    *x = c * a0 - s * b0;
                    *y = s * a0 + c * b0;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = cols.iter().map(|c| l2_norm(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Largest singular value of `A` by power iteration on `A^T A`.
pub fn spectral_norm(a: &DenseMatrix, iters: usize, tol: f64) -> f64 {
    let at = a.transpose();
    power_iteration_gram(a.cols, iters, tol, |v| at.mul_vec(&a.mul_vec(v)))
}

/// Matrix-free power iteration: `apply_gram` must compute `A^T A v`.
///
/// Returns `sqrt` of the converged Rayleigh quotient. The start vector is the
/// normalized all-ones vector; if that yields a zero quotient the iteration is
/// restarted once from an index-weighted vector.
pub fn power_iteration_gram(
    dim: usize,
    iters: usize,
    tol: f64,
    mut apply_gram: impl FnMut(&[f64]) -> Vec<f64>,
) -> f64 {
    assert!(iters >= 1, "power iteration needs at least one step");
    let ones = vec![1.0 / (dim as f64).sqrt(); dim];
    let lambda = run_power(ones, iters, tol, &mut apply_gram);
    let lambda = if lambda <= f64::MIN_POSITIVE {
        let mut ramp: Vec<f64> = (1..=dim).map(|i| i as f64).collect();
        let n = l2_norm(&ramp);
        ramp.iter_mut().for_each(|x| *x /= n);
        run_power(ramp, iters, tol, &mut apply_gram)
    } else {
        lambda
    };
    lambda.max(0.0).sqrt()
}

fn run_power(mut v: Vec<f64>, iters: usize, tol: f64, apply_gram: &mut impl FnMut(&[f64]) -> Vec<f64>) -> f64 {
    let mut prev = f64::NAN;
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = apply_gram(&v);
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let wn = l2_norm(&w);
        if wn == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / wn).collect();
        if (lambda - prev).abs() <= tol * lambda.abs() {
            break;
        }
        prev = lambda;
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qr_of_identity_is_identity() {
        let (q, r) = qr_decompose(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(q, DenseMatrix::identity(3));
        assert_eq!(r, DenseMatrix::identity(3));
    }

    #[test]
    fn qr_of_swap_matrix() {
        let a = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (q, r) = qr_decompose(&a).unwrap();
        assert_eq!(q, a);
        assert_eq!(r, DenseMatrix::identity(2));
    }

    #[test]
    fn qr_rejects_non_square() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(matches!(qr_decompose(&a), Err(Error::NotSquare { .. })));
    }

    #[test]
    fn qr_of_singular_matrix() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let (q, r) = qr_decompose(&a).unwrap();
        let back = q.matmul(&r).unwrap();
        assert!(frobenius_norm(&back.sub(&a).unwrap()) < 1e-12);
        assert!(q.orthogonality_defect() < 1e-12);
        assert!(r.get(1, 1).abs() < 1e-12);
    }

    #[test]
    fn eig_identity_and_diagonal() {
        assert_eq!(eig_symmetric(&DenseMatrix::identity(4)).unwrap(), vec![1.0; 4]);
        let d = DenseMatrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(eig_symmetric(&d).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(eig_symmetric(&a), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn singular_values_of_identity_and_rectangular() {
        assert_eq!(singular_values(&DenseMatrix::identity(5)), vec![1.0; 5]);
        let a = DenseMatrix::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 4.0, 0.0]]).unwrap();
        assert_eq!(singular_values(&a), vec![4.0, 3.0]);
    }

    #[test]
    fn spectral_norm_simple_cases() {
        assert!((spectral_norm(&DenseMatrix::identity(6), 50, 1e-14) - 1.0).abs() < 1e-12);
        let two = DenseMatrix::identity(3).scale(2.0);
        assert!((spectral_norm(&two, 50, 1e-14) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_reseeds_when_ones_is_in_the_kernel() {
        // ones vector is annihilated, largest singular value is 2
        let a = DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        let s = spectral_norm(&a, 100, 1e-14);
        assert!((s - 2.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn norms() {
        assert_eq!(l2_norm(&[0.0, 0.0]), 0.0);
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert!((frobenius_norm(&DenseMatrix::identity(3)) - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn construction_rejects_nan_and_bad_length() {
        assert!(matches!(DenseMatrix::new(1, 2, vec![1.0, f64::NAN]), Err(Error::NonFinite { index: 1 })));
        assert!(matches!(DenseMatrix::new(2, 2, vec![1.0]), Err(Error::InvalidData { .. })));
    }
}
