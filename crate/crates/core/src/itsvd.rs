//! Incremental truncated SVD.
//!
//! The state holds the top singular values `S` and left singular vectors `U`
//! of the running matrix
//!
//! ```text
//! B_1 = H_1,    B_t = [U_{t-1} diag(S_{t-1}), H_t]
//! ```
//!
//! truncated to `k_t` factors after every block. Right singular vectors are
//! never formed. An update projects the new block out of `span(U)`, takes a
//! thin QR of the residual, computes the SVD of the square
//! `(k_{t-1} + m_t)` core matrix
//!
//! ```text
//! [ diag(S)  U^T H ]
//! [   0        R   ]
//! ```
//!
//! maps the leading left factors back through `[U, Q]`, and finally
//! re-orthonormalizes the result with a QR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, scale_columns, Matrix, Vector};

/// Default largest `E` for which dense `E x E` diagnostics are formed.
pub const DEFAULT_MATERIALIZATION_CAP: usize = 4000;

/// Orthonormality tolerance maintained across updates.
pub const ORTHONORMALITY_TOL: f64 = 1e-8;

/// Running truncated factors `(U, S)` plus bookkeeping.
#[derive(Debug, Clone)]
pub struct TruncatedFactorState {
    u: Matrix,
    s: Vector,
    samples_seen: usize,
    k_history: Vec<usize>,
}

/// What a single init/update step saw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateReport {
    /// All singular values of `B_t`, descending.
    pub spectrum: Vec<f64>,
    /// Rank asked for by the caller.
    pub requested_rank: usize,
    /// Rank actually kept: the request, clamped to the numerical rank of `B_t`.
    pub kept_rank: usize,
    /// Number of columns of `B_t`.
    pub b_cols: usize,
}

impl UpdateReport {
    /// Eigenvalues of `B_t B_t^T` (squared singular values), descending.
    pub fn gram_spectrum(&self) -> Vec<f64> {
        self.spectrum.iter().map(|s| s * s).collect()
    }
}

/// Number of leading singular values of a `rows x cols` matrix that exceed
/// `max(rows, cols) * eps * s_max`.
fn numerical_rank(s: &[f64], rows: usize, cols: usize) -> usize {
    let top = s.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    let tol = top * f64::EPSILON * rows.max(cols) as f64;
    s.iter().take_while(|&&x| x > tol).count()
}

impl TruncatedFactorState {
    /// Top-`k` factors of the first block.
    pub fn init(h: &Matrix, k: usize) -> Result<(Self, UpdateReport)> {
        let p = h.nrows().min(h.ncols());
        if k == 0 || k > p {
            return Err(Error::invalid_arg(format!(
                "initial rank {k} outside 1..={p} for a {}x{} block",
                h.nrows(),
                h.ncols()
            )));
        }
        let f = linalg::svd(h, false)?;
        let spectrum: Vec<f64> = f.s.iter().copied().collect();
        let kept = k.min(numerical_rank(&spectrum, h.nrows(), h.ncols()));
        let u = f.u.columns(0, kept).into_owned();
        let s = f.s.rows(0, kept).into_owned();
        let state = Self {
            u,
            s,
            samples_seen: h.ncols(),
            k_history: vec![kept],
        };
        let report = UpdateReport {
            spectrum,
            requested_rank: k,
            kept_rank: kept,
            b_cols: h.ncols(),
        };
        Ok((state, report))
    }

    /// Absorb a new block and keep the top-`k` factors of `[U diag(S), H]`.
    pub fn update(&self, h: &Matrix, k: usize) -> Result<(Self, UpdateReport)> {
        let dim = self.dim();
        if h.nrows() != dim {
            return Err(Error::invalid_arg(format!(
                "block has {} rows, state dimension is {dim}",
                h.nrows()
            )));
        }
        let m = h.ncols();
        if m == 0 {
            return Err(Error::invalid_arg("empty block"));
        }
        let prev = self.rank();
        if k == 0 || k > prev + m {
            return Err(Error::invalid_arg(format!(
                "rank {k} outside 1..={} (previous rank {prev} + {m} new samples)",
                prev + m
            )));
        }
        linalg::check_finite(h)?;

        let (q, coeffs, r) = residual_qr(&self.u, h);

        let n = prev + m;
        let mut core = Matrix::zeros(n, n);
        for i in 0..prev {
            core[(i, i)] = self.s[i];
        }
        core.view_mut((0, prev), (prev, m)).copy_from(&coeffs);
        core.view_mut((prev, prev), (m, m)).copy_from(&r);

        let f = linalg::svd(&core, false)?;
        let spectrum: Vec<f64> = f.s.iter().copied().collect();
        let kept = k.min(numerical_rank(&spectrum, dim, n)).min(dim);

        let top = f.u.columns(0, kept);
        let mut u_new = &self.u * top.rows(0, prev) + &q * top.rows(prev, m);
        if kept > 0 {
            u_new = linalg::orthonormalize(&u_new)?;
        }
        let s_new = f.s.rows(0, kept).into_owned();

        let mut k_history = self.k_history.clone();
        k_history.push(kept);
        let state = Self {
            u: u_new,
            s: s_new,
            samples_seen: self.samples_seen + m,
            k_history,
        };
        let report = UpdateReport {
            spectrum,
            requested_rank: k,
            kept_rank: kept,
            b_cols: n,
        };
        Ok((state, report))
    }

    /// Rebuild a state from stored parts, checking its invariants.
    pub fn from_parts(u: Matrix, s: Vector, samples_seen: usize, k_history: Vec<usize>) -> Result<Self> {
        if u.ncols() != s.len() {
            return Err(Error::InvalidState(format!(
                "{} singular vectors but {} singular values",
                u.ncols(),
                s.len()
            )));
        }
        if s.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidState("singular values must be positive and finite".into()));
        }
        if s.as_slice().windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidState("singular values must be non-increasing".into()));
        }
        if k_history.last().copied().unwrap_or(0) != s.len() {
            return Err(Error::InvalidState("rank history does not end at the current rank".into()));
        }
        let state = Self {
            u,
            s,
            samples_seen,
            k_history,
        };
        let err = state.orthonormality_error();
        if err > ORTHONORMALITY_TOL {
            return Err(Error::InvalidState(format!(
                "left factor is not orthonormal (||U^T U - I||_F = {err:e})"
            )));
        }
        Ok(state)
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn singular_values(&self) -> &Vector {
        &self.s
    }

    /// Feature dimension `E`.
    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    /// Current rank `k_t`.
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Total samples `M_t` absorbed so far.
    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    /// Number of blocks `t` absorbed so far.
    pub fn tasks_seen(&self) -> usize {
        self.k_history.len()
    }

    pub fn k_history(&self) -> &[usize] {
        &self.k_history
    }

    /// `||U^T U - I||_F`.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.rank();
        (self.u.tr_mul(&self.u) - Matrix::identity(k, k)).norm()
    }

    /// `U diag(S)`, the left block of the next `B_t`.
    pub fn scaled_factor(&self) -> Matrix {
        let mut us = self.u.clone();
        scale_columns(&mut us, self.s.as_slice());
        us
    }

    /// `B_{t+1} = [U diag(S), H]` for a candidate next block.
    pub fn next_b(&self, h: &Matrix) -> Result<Matrix> {
        linalg::hcat(&self.scaled_factor(), h)
    }

    /// `U diag(S^2) U^T`, refused when `E` exceeds `cap`.
    pub fn lowrank_gram(&self, cap: usize) -> Result<Matrix> {
        let dim = self.dim();
        if dim > cap {
            return Err(Error::SizeCap { dim, cap });
        }
        let us = self.scaled_factor();
        Ok(&us * us.transpose())
    }
}

/// Thin QR of `(I - U U^T) H` by block Gram-Schmidt with re-orthogonalization.
///
/// Returns `(Q, C, R)` with `H = U C + Q R` up to rounding. Columns whose
/// residual is numerically in `span([U, Q_<j])` get a zero column in `Q` and
/// a zero row in `R`, so every nonzero column of `Q` is orthogonal to `U`.
fn residual_qr(u: &Matrix, h: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (dim, m) = h.shape();
    let mut coeffs = u.tr_mul(h);
    let mut resid = h - u * &coeffs;
    let second = u.tr_mul(&resid);
    resid -= u * &second;
    coeffs += second;

    let mut q = Matrix::zeros(dim, m);
    let mut r = Matrix::zeros(m, m);
    let mut accepted: Vec<usize> = Vec::with_capacity(m);
    for j in 0..m {
        let scale = h.column(j).norm();
        let mut v = resid.column(j).clone_owned();
        let mut before = v.norm();
        let mut keep = false;
        for _ in 0..3 {
            if before <= scale * f64::EPSILON || before == 0.0 {
                break;
            }
            for &i in &accepted {
                let d = q.column(i).dot(&v);
                v.axpy(-d, &q.column(i), 1.0);
                r[(i, j)] += d;
            }
            let cu = u.tr_mul(&v);
            v -= u * &cu;
            for (row, c) in cu.iter().enumerate() {
                coeffs[(row, j)] += c;
            }
            let after = v.norm();
            if after >= std::f64::consts::FRAC_1_SQRT_2 * before {
                keep = after > scale * f64::EPSILON;
                break;
            }
            before = after;
        }
        if keep {
            let nv = v.norm();
            q.set_column(j, &(v / nv));
            r[(j, j)] = nv;
            accepted.push(j);
        }
    }
    (q, coeffs, r)
}
