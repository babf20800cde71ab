//! Dense row-major matrices and the few factorizations the crate needs:
//! symmetric eigendecomposition (cyclic Jacobi), LU and Cholesky solves,
//! and explicit Kronecker products for the oracles.
//!
//! Vectorization is row-major throughout: `vec(W)[i * cols + j] = W[i][j]`,
//! so that for a weight `W = δ xᵀ` one has `vec(W) = δ ⊗ x`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul: inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                math::axpy(a, other.row(k), out_row);
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul: row mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                math::axpy(a, b_row, out.row_mut(i));
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec: length mismatch");
        (0..self.rows).map(|i| math::dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · x`
    pub fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "t_matvec: length mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            math::axpy(xi, self.row(i), &mut out);
        }
        out
    }

    /// `self += alpha · u vᵀ`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = alpha * ui;
            if s == 0.0 {
                continue;
            }
            math::axpy(s, v, self.row_mut(i));
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        math::axpy(alpha, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn frobenius(&self) -> f64 {
        math::norm(&self.data)
    }

    /// Largest absolute difference between `self` and its transpose.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max(math::abs(self[(i, j)] - self[(j, i)]));
            }
        }
        worst
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Mat) -> Mat {
        let (ra, ca, rb, cb) = (self.rows, self.cols, other.rows, other.cols);
        Mat::from_fn(ra * rb, ca * cb, |r, c| {
            self[(r / rb, c / cb)] * other[(r % rb, c % cb)]
        })
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigendecomposition `A = Q diag(values) Qᵀ` of a symmetric matrix.
/// Eigenvectors are the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

impl SymEigen {
    pub fn reconstruct(&self) -> Mat {
        let n = self.values.len();
        let scaled = Mat::from_fn(n, n, |i, j| self.vectors[(i, j)] * self.values[j]);
        scaled.matmul(&self.vectors.transpose())
    }
}

/// Cyclic Jacobi eigendecomposition. Only the upper triangle's symmetric part
/// matters; the input is symmetrized first.
pub fn sym_eigen(a: &Mat) -> SymEigen {
    assert_eq!(a.rows, a.cols, "sym_eigen: matrix must be square");
    let n = a.rows;
    let mut m = Mat::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = Mat::identity(n);
    let total = m.frobenius();
    if total == 0.0 {
        return SymEigen {
            values: vec![0.0; n],
            vectors: v,
        };
    }

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if math::sqrt(off) <= 1e-15 * total {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if math::abs(theta) > 1e150 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (math::abs(theta) + math::sqrt(theta * theta + 1.0))
                };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    SymEigen {
        values: (0..n).map(|i| m[(i, i)]).collect(),
        vectors: v,
    }
}

/// Solves `A x = b` by LU decomposition with partial pivoting.
pub fn lu_solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::DimensionMismatch {
            context: "lu_solve (square)",
            expected: n,
            actual: a.cols,
        });
    }
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            context: "lu_solve rhs",
            expected: n,
            actual: b.len(),
        });
    }
    let mut lu = a.clone();
    let mut x = b.to_vec();
    let scale = lu.data.iter().fold(0.0f64, |acc, v| acc.max(math::abs(*v)));
    for col in 0..n {
        let (piv, best) = (col..n)
            .map(|r| (r, math::abs(lu[(r, col)])))
            .fold((col, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if best <= f64::EPSILON * scale * n as f64 || best == 0.0 {
            return Err(Error::SingularMatrix { pivot: col });
        }
        if piv != col {
            for j in 0..n {
                lu.data.swap(col * n + j, piv * n + j);
            }
            x.swap(col, piv);
        }
        let d = lu[(col, col)];
        for r in (col + 1)..n {
            let f = lu[(r, col)] / d;
            if f == 0.0 {
                continue;
            }
            lu[(r, col)] = f;
            for j in (col + 1)..n {
                let u = lu[(col, j)];
                lu[(r, j)] -= f * u;
            }
            x[r] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s -= lu[(i, j)] * x[j];
        }
        x[i] = s / lu[(i, i)];
    }
    Ok(x)
}

/// Cholesky factor `L` (lower triangular) of a symmetric positive definite matrix.
pub fn cholesky(a: &Mat) -> Result<Mat> {
    let n = a.rows;
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::SingularMatrix { pivot: i });
                }
                l[(i, i)] = math::sqrt(s);
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solves `A x = b` given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_spd(n: usize, seed: u64) -> Mat {
        let mut r = rng::seeded(seed, 0);
        let b = Mat::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let mut a = b.matmul(&b.transpose());
        for i in 0..n {
            a[(i, i)] += 0.1;
        }
        a
    }

    #[test]
    fn jacobi_reconstructs_and_is_orthonormal() {
        for (n, seed) in [(1, 1), (2, 2), (5, 3), (12, 4), (30, 5)] {
            let a = random_spd(n, seed);
            let e = sym_eigen(&a);
            let back = e.reconstruct();
            let err = math::rel_err(back.as_slice(), a.as_slice());
            assert!(err < 1e-12, "n={n} err={err}");
            let qtq = e.vectors.t_matmul(&e.vectors);
            let id = Mat::identity(n);
            assert!(math::rel_err(qtq.as_slice(), id.as_slice()) < 1e-12);
        }
    }

    #[test]
    fn jacobi_handles_zero_and_diagonal() {
        let e = sym_eigen(&Mat::zeros(3, 3));
        assert_eq!(e.values, vec![0.0; 3]);
        let e = sym_eigen(&Mat::diag(&[3.0, 1.0, 2.0]));
        assert_eq!(e.values, vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn lu_and_cholesky_agree() {
        let a = random_spd(9, 11);
        let b: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
        let x1 = lu_solve(&a, &b).unwrap();
        let x2 = cholesky_solve(&cholesky(&a).unwrap(), &b);
        assert!(math::rel_err(&x1, &x2) < 1e-12);
        let resid = math::rel_err(&a.matvec(&x1), &b);
        assert!(resid < 1e-12);
    }

    #[test]
    fn lu_rejects_singular() {
        let a = Mat::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            lu_solve(&a, &[1.0, 1.0]),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn kron_matches_row_major_vec_identity() {
        // (A ⊗ B) vec(V) = vec(A V Bᵀ) under row-major vec.
        let mut r = rng::seeded(7, 0);
        let a = Mat::from_fn(3, 2, |_, _| r.random_range(-1.0..1.0));
        let b = Mat::from_fn(4, 5, |_, _| r.random_range(-1.0..1.0));
        let v = Mat::from_fn(2, 5, |_, _| r.random_range(-1.0..1.0));
        let lhs = a.kron(&b).matvec(v.as_slice());
        let rhs = a.matmul(&v).matmul(&b.transpose());
        assert!(math::rel_err(&lhs, rhs.as_slice()) < 1e-14);
    }

    #[test]
    fn outer_product_vec_is_kron_of_vectors() {
        let d = [1.0, -2.0];
        let x = [0.5, 3.0, 4.0];
        let mut w = Mat::zeros(2, 3);
        w.add_outer(1.0, &d, &x);
        let dk = Mat::from_vec(2, 1, d.to_vec()).kron(&Mat::from_vec(3, 1, x.to_vec()));
        assert_eq!(w.as_slice(), dk.as_slice());
    }
}
