//! Small dense matrices over any [`Scalar`].
//!
//! Every matrix in the models is tiny (channel counts and SPD sizes), so a
//! row-major `Vec` with textbook algorithms is all that is needed.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Matrix functions applied through a symmetric eigendecomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymFn {
    Exp,
    Log,
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

impl<T> Mat<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Mat<U> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn diag(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let bt = other.transpose();
        let mut out = Vec::with_capacity(self.rows * other.cols);
        for i in 0..self.rows {
            let r = self.row(i);
            for j in 0..other.cols {
                out.push(T::dot(r, bt.row(j)));
            }
        }
        Mat::from_vec(self.rows, other.cols, out)
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec dimension");
        (0..self.rows).map(|i| T::dot(self.row(i), v)).collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        Mat::from_vec(self.rows, self.cols, self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        Mat::from_vec(self.rows, self.cols, self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|&a| a * s)
    }

    pub fn frobenius(&self) -> T {
        T::dot(&self.data, &self.data).sqrt()
    }

    /// Largest absolute deviation from symmetry.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs().value());
            }
        }
        worst
    }

    /// `‖AᵀA − I‖_max`.
    pub fn orthogonality_defect(&self) -> f64 {
        let g = self.transpose().matmul(self);
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)].value() - target).abs());
            }
        }
        worst
    }
}

/// LU factorization with partial pivoting, stored compactly.
pub struct Lu<T> {
    lu: Mat<T>,
    perm: Vec<usize>,
    sign: f64,
}

pub fn lu<T: Scalar>(a: &Mat<T>) -> Result<Lu<T>> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::Shape(format!("LU of a {}x{} matrix", a.rows, a.cols)));
    }
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for k in 0..n {
        let (p, best) = (k..n)
            .map(|i| (i, lu[(i, k)].abs().value()))
            .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best == 0.0 || !best.is_finite() {
            return Err(Error::Domain("singular matrix in LU factorization".into()));
        }
        if p != k {
            for j in 0..n {
                lu.data.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
            sign = -sign;
        }
        let pivot = lu[(k, k)];
        for i in k + 1..n {
            let f = lu[(i, k)] / pivot;
            lu[(i, k)] = f;
            for j in k + 1..n {
                let u = lu[(k, j)];
                lu[(i, j)] -= f * u;
            }
        }
    }
    Ok(Lu { lu, perm, sign })
}

impl<T: Scalar> Lu<T> {
    pub fn solve_vec(&self, b: &[T]) -> Vec<T> {
        let n = self.lu.rows;
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s = T::dot(&self.lu.row(i)[..i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s = T::dot(&self.lu.row(i)[i + 1..], &x[i + 1..]);
            x[i] = (x[i] - s) / self.lu[(i, i)];
        }
        x
    }

    pub fn solve(&self, b: &Mat<T>) -> Mat<T> {
        let bt = b.transpose();
        let mut cols = Vec::with_capacity(b.cols);
        for j in 0..b.cols {
            cols.extend(self.solve_vec(bt.row(j)));
        }
        Mat::from_vec(b.cols, b.rows, cols).transpose()
    }

    /// `(log|det|, sign)`.
    pub fn log_abs_det(&self) -> (T, f64) {
        let mut s = self.sign;
        let mut acc = T::zero();
        for i in 0..self.lu.rows {
            let d = self.lu[(i, i)];
            if d.value() < 0.0 {
                s = -s;
            }
            acc += d.abs().ln();
        }
        (acc, s)
    }
}

pub fn inverse<T: Scalar>(a: &Mat<T>) -> Result<Mat<T>> {
    Ok(lu(a)?.solve(&Mat::identity(a.rows)))
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky<T: Scalar>(a: &Mat<T>) -> Result<Mat<T>> {
    let n = a.rows;
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = T::dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                let d = a[(i, i)] - s;
                if !(d.value() > 0.0) {
                    return Err(Error::Domain("matrix is not positive definite".into()));
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn forward_substitute<T: Scalar>(l: &Mat<T>, b: &[T]) -> Vec<T> {
    let mut x = b.to_vec();
    for i in 0..l.rows {
        let s = T::dot(&l.row(i)[..i], &x[..i]);
        x[i] = (x[i] - s) / l[(i, i)];
    }
    x
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as columns.
pub fn sym_eigen<T: Scalar>(a: &Mat<T>) -> Result<(Vec<T>, Mat<T>)> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::Shape(format!("eigendecomposition of a {}x{} matrix", a.rows, a.cols)));
    }
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix entry in eigendecomposition".into()));
    }
    let mut m = a.clone();
    // symmetrize so that tiny asymmetries do not stall the sweeps
    for i in 0..n {
        for j in 0..i {
            let s = (m[(i, j)] + m[(j, i)]) * T::c(0.5);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    let mut v = Mat::identity(n);
    let eps2 = T::epsilon().value().powi(2);
    let total = m.frobenius().value().powi(2);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)].value().powi(2);
            }
        }
        if off <= eps2 * total * 1e-2 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.value() == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (apq + apq);
                let t = {
                    let at = theta.abs();
                    let sgn = if theta.value() >= 0.0 { T::one() } else { -T::one() };
                    sgn / (at + (at * at + T::one()).sqrt())
                };
                let c = (t * t + T::one()).sqrt().recip();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].value().total_cmp(&m[(j, j)].value()));
    let lambda = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vecs = Mat::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vecs[(k, new)] = v[(k, old)];
        }
    }
    Ok((lambda, vecs))
}

/// `U diag(d) Uᵀ`.
pub fn reconstruct<T: Scalar>(u: &Mat<T>, d: &[T]) -> Mat<T> {
    let n = u.rows;
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = T::zero();
            for k in 0..n {
                s += u[(i, k)] * d[k] * u[(j, k)];
            }
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    out
}

/// Generic matrix function through [`sym_eigen`].
pub fn sym_function_eigen<T: Scalar>(a: &Mat<T>, f: SymFn) -> Result<Mat<T>> {
    let (lambda, u) = sym_eigen(a)?;
    let fl: Vec<T> = match f {
        SymFn::Exp => lambda.iter().map(|l| l.exp()).collect(),
        SymFn::Log => {
            if lambda.iter().any(|l| l.value() <= 0.0) {
                return Err(Error::Domain("matrix logarithm of a non-positive-definite matrix".into()));
            }
            lambda.iter().map(|l| l.ln()).collect()
        }
    };
    Ok(reconstruct(&u, &fl))
}

pub fn expm_sym<T: Scalar>(a: &Mat<T>) -> Result<Mat<T>> {
    T::sym_function(a, SymFn::Exp)
}

pub fn logm_spd<T: Scalar>(a: &Mat<T>) -> Result<Mat<T>> {
    T::sym_function(a, SymFn::Log)
}

/// Number of free parameters of an `n×n` skew-symmetric matrix.
pub fn skew_dim(n: usize) -> usize {
    n * (n.saturating_sub(1)) / 2
}

/// Builds a skew-symmetric matrix from its strictly-upper entries (row-major).
pub fn skew_from_params<T: Scalar>(n: usize, params: &[T]) -> Mat<T> {
    assert_eq!(params.len(), skew_dim(n), "skew parameter count");
    let mut a = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            a[(i, j)] = params[k];
            a[(j, i)] = -params[k];
            k += 1;
        }
    }
    a
}

/// Cayley transform `(I − A)⁻¹ (I + A)` of a skew-symmetric `A`; always in SO(n).
pub fn cayley<T: Scalar>(a: &Mat<T>) -> Result<Mat<T>> {
    let n = a.rows;
    let id = Mat::identity(n);
    Ok(lu(&id.sub(a))?.solve(&id.add(a)))
}

/// Applies the Cayley rotation of `a` to `v` without forming the matrix.
pub fn cayley_apply<T: Scalar>(a: &Mat<T>, v: &[T]) -> Result<Vec<T>> {
    let n = a.rows;
    let id = Mat::identity(n);
    let w: Vec<T> = a.matvec(v).iter().zip(v).map(|(&av, &x)| x + av).collect();
    Ok(lu(&id.sub(a))?.solve_vec(&w))
}

/// Applies the inverse (transpose) Cayley rotation of `a` to `v`.
pub fn cayley_apply_inverse<T: Scalar>(a: &Mat<T>, v: &[T]) -> Result<Vec<T>> {
    let neg = a.scale(-T::one());
    cayley_apply(&neg, v)
}
