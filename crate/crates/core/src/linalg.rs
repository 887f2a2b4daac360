//! Dense real-matrix kernels.
//!
//! Matrices are [`nalgebra::DMatrix<f64>`], stored column-major: column `j`
//! of an `E x m` feature block occupies `data[j*E .. (j+1)*E]`, so feature
//! blocks append as contiguous columns. All routines are pure functions of
//! their inputs.

use nalgebra::{DMatrix, DVector, SymmetricEigen, QR, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Iteration cap handed to the SVD and symmetric eigen routines.
const MAX_SWEEPS: usize = 10_000;

/// Left factor, singular values (descending) and optionally the right factor.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vector,
    pub v: Option<Matrix>,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U diag(S) V^T`. Fails when V was not computed.
    pub fn reconstruct(&self) -> Result<Matrix> {
        let v = self
            .v
            .as_ref()
            .ok_or_else(|| Error::InvalidState("right singular vectors were not computed".into()))?;
        let mut us = self.u.clone();
        scale_columns(&mut us, self.s.as_slice());
        Ok(us * v.transpose())
    }

    /// Keep the leading `r` triplets.
    pub fn truncate(mut self, r: usize) -> Self {
        let r = r.min(self.s.len());
        self.u = self.u.columns(0, r).into_owned();
        self.s = self.s.rows(0, r).into_owned();
        self.v = self.v.map(|v| v.columns(0, r).into_owned());
        self
    }
}

/// Build a matrix from column-major data, rejecting non-finite entries.
pub fn from_col_major(rows: usize, cols: usize, data: &[f64]) -> Result<Matrix> {
    if rows * cols != data.len() {
        return Err(Error::invalid_arg(format!(
            "{rows}x{cols} matrix needs {} entries, got {}",
            rows * cols,
            data.len()
        )));
    }
    let m = Matrix::from_column_slice(rows, cols, data);
    check_finite(&m)?;
    Ok(m)
}

pub fn check_finite(a: &Matrix) -> Result<()> {
    if let Some(pos) = a.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid_input(format!(
            "non-finite entry at row {}, column {}",
            pos % a.nrows().max(1),
            pos / a.nrows().max(1)
        )));
    }
    Ok(())
}

/// Multiply column `j` of `a` by `scale[j]` in place.
pub fn scale_columns(a: &mut Matrix, scale: &[f64]) {
    for (mut col, &s) in a.column_iter_mut().zip(scale) {
        col *= s;
    }
}

/// Thin Householder QR with the sign convention `R_jj >= 0`.
///
/// For `A` of size `n x m`, `Q` is `n x min(n, m)` and `R` is `min(n, m) x m`.
/// Rank-deficient inputs are accepted; the corresponding diagonal entries of
/// `R` are (numerically) zero.
pub fn qr_thin(a: &Matrix) -> Result<(Matrix, Matrix)> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::invalid_arg("qr_thin needs a non-empty matrix"));
    }
    check_finite(a)?;
    let qr = QR::new(a.clone());
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..r.nrows() {
        if r[(j, j)] < 0.0 {
            r.row_mut(j).neg_mut();
            q.column_mut(j).neg_mut();
        }
    }
    Ok((q, r))
}

/// Orthonormal basis for the column space of a full-column-rank `A`, with
/// the columns aligned to those of `A` (positive diagonal in `R`).
pub fn orthonormalize(a: &Matrix) -> Result<Matrix> {
    Ok(qr_thin(a)?.0)
}

/// Compact SVD: `U` is `n x p`, `S` has `p = min(n, m)` entries sorted in
/// descending order, `V` (when requested) is `m x p`.
pub fn svd(a: &Matrix, compute_v: bool) -> Result<SvdFactors> {
    check_finite(a)?;
    let (n, m) = a.shape();
    if n == 0 || m == 0 {
        return Err(Error::invalid_arg("svd needs a non-empty matrix"));
    }
    let dec = SVD::try_new(a.clone(), true, compute_v, f64::EPSILON, MAX_SWEEPS).ok_or_else(|| {
        Error::Numeric(format!(
            "SVD of a {n}x{m} matrix did not converge within {MAX_SWEEPS} iterations"
        ))
    })?;
    let u = dec.u.expect("u requested");
    let v = dec.v_t.map(|vt| vt.transpose());
    let mut order: Vec<usize> = (0..dec.singular_values.len()).collect();
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));
    let s = Vector::from_iterator(order.len(), order.iter().map(|&i| dec.singular_values[i].max(0.0)));
    let u = Matrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let v = v.map(|v| Matrix::from_columns(&order.iter().map(|&i| v.column(i)).collect::<Vec<_>>()));
    Ok(SvdFactors { u, s, v })
}

/// Singular values only, descending.
pub fn singular_values(a: &Matrix) -> Result<Vector> {
    check_finite(a)?;
    let (n, m) = a.shape();
    if n == 0 || m == 0 {
        return Ok(Vector::zeros(0));
    }
    let dec = SVD::try_new(a.clone(), false, false, f64::EPSILON, MAX_SWEEPS).ok_or_else(|| {
        Error::Numeric(format!(
            "SVD of a {n}x{m} matrix did not converge within {MAX_SWEEPS} iterations"
        ))
    })?;
    let mut s: Vec<f64> = dec.singular_values.iter().map(|x| x.max(0.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(Vector::from_vec(s))
}

/// Top-`r` singular triplets of `A` (`1 <= r <= min(rows, cols)`).
pub fn truncated_svd(a: &Matrix, r: usize) -> Result<SvdFactors> {
    let p = a.nrows().min(a.ncols());
    if r == 0 || r > p {
        return Err(Error::invalid_arg(format!(
            "truncation rank {r} outside 1..={p}"
        )));
    }
    Ok(svd(a, true)?.truncate(r))
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.norm()
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    Ok(singular_values(a)?.iter().copied().next().unwrap_or(0.0))
}

/// `||A - B||_F / ||B||_F`, or the absolute difference when `B = 0`.
pub fn relative_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff = (a - b).norm();
    let base = b.norm();
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::invalid_input(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    check_finite(a)?;
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::invalid_input(format!(
            "matrix is not symmetric (max |A - A^T| = {asym:e})"
        )));
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix, descending.
pub fn sym_eigvals(a: &Matrix) -> Result<Vector> {
    Ok(sym_eigen(a)?.0)
}

/// Eigenvalues (descending) and matching orthonormal eigenvectors.
pub fn sym_eigen(a: &Matrix) -> Result<(Vector, Matrix)> {
    check_symmetric(a)?;
    if a.nrows() == 0 {
        return Ok((Vector::zeros(0), Matrix::zeros(0, 0)));
    }
    let sym = 0.5 * (a + a.transpose());
    let n = sym.nrows();
    let dec = SymmetricEigen::try_new(sym, f64::EPSILON, MAX_SWEEPS).ok_or_else(|| {
        Error::Numeric(format!(
            "symmetric eigensolver on a {n}x{n} matrix did not converge within {MAX_SWEEPS} iterations"
        ))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| dec.eigenvalues[j].total_cmp(&dec.eigenvalues[i]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| dec.eigenvalues[i]));
    let vectors =
        Matrix::from_columns(&order.iter().map(|&i| dec.eigenvectors.column(i)).collect::<Vec<_>>());
    Ok((values, vectors))
}

/// Outcome of [`power_iteration_norm`].
#[derive(Debug, Clone, Copy)]
pub struct PowerIteration {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Spectral norm of a symmetric operator given only through `apply`.
///
/// Iterates `x <- A x / ||A x||` from a seeded Gaussian start and stops when
/// the estimate changes by less than `rel_tol` (relative) between steps.
pub fn power_iteration_norm<F>(dim: usize, apply: F, rel_tol: f64, max_iter: usize, seed: u64) -> PowerIteration
where
    F: Fn(&Vector) -> Vector,
{
    if dim == 0 {
        return PowerIteration {
            value: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = Vector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
    x /= x.norm();
    let mut estimate = 0.0;
    for it in 1..=max_iter {
        // two applications per step so that +/- eigenvalue pairs do not stall
        let y = apply(&x);
        let z = apply(&y);
        let norm_z = z.norm();
        if norm_z == 0.0 {
            return PowerIteration {
                value: y.norm(),
                iterations: it,
                converged: true,
            };
        }
        let next = norm_z.sqrt();
        x = z / norm_z;
        if (next - estimate).abs() <= rel_tol * next {
            return PowerIteration {
                value: next,
                iterations: it,
                converged: true,
            };
        }
        estimate = next;
    }
    PowerIteration {
        value: estimate,
        iterations: max_iter,
        converged: false,
    }
}

/// `|| wa * A A^T - wb * B B^T ||` (spectral), computed exactly through a
/// QR of `[A, B]` without forming the `rows x rows` matrices.
pub fn gram_difference_norm(a: &Matrix, wa: f64, b: &Matrix, wb: f64) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::invalid_arg("gram_difference_norm: row mismatch"));
    }
    let n = a.nrows();
    let (ka, kb) = (a.ncols(), b.ncols());
    if ka + kb == 0 || n == 0 {
        return Ok(0.0);
    }
    let mut z = Matrix::zeros(n, ka + kb);
    z.columns_mut(0, ka).copy_from(a);
    z.columns_mut(ka, kb).copy_from(b);
    let (_, r) = qr_thin(&z)?;
    // Z diag(wa I, -wb I) Z^T = Q (R D R^T) Q^T
    let mut rd = r.clone();
    let weights: Vec<f64> = std::iter::repeat(wa).take(ka).chain(std::iter::repeat(-wb).take(kb)).collect();
    scale_columns(&mut rd, &weights);
    let small = &rd * r.transpose();
    let small = 0.5 * (&small + small.transpose());
    let eig = sym_eigvals(&small)?;
    Ok(eig.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())))
}

/// `A^T A` computed as a symmetric product.
pub fn gram_cols(a: &Matrix) -> Matrix {
    a.tr_mul(a)
}

/// `A A^T`.
pub fn gram_rows(a: &Matrix) -> Matrix {
    a * a.transpose()
}

/// Horizontal concatenation `[A, B]`.
pub fn hcat(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.ncols() > 0 && b.ncols() > 0 && a.nrows() != b.nrows() {
        return Err(Error::invalid_arg(format!(
            "cannot concatenate {} rows with {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    let rows = if a.ncols() > 0 { a.nrows() } else { b.nrows() };
    let mut out = Matrix::zeros(rows, a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    Ok(out)
}
