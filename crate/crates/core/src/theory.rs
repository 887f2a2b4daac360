//! Theory quantities of the continual truncation and evaluators for the
//! error bounds stated in terms of them.
//!
//! Notation: `mu_j(.)` is the `j`-th largest eigenvalue, `B_t` the matrix
//! whose truncated factors form the state after task `t`, `M_t` the number of
//! samples seen and `k_t` the retained rank.
//!
//! ```text
//! a_t     = sum_{i<=t} mu_{k_i+1}(B_i B_i^T),              a_0 = 0
//! gamma_t = mu_{k_t}(B_t B_t^T) / max_{i<t} mu_{k_i+1}(B_i B_i^T),  gamma_1 = 1
//! pen_t   = min(M_{t-1} - k_{t-1}, (t-1) k_t)
//! gap_t   = mu_{k_t}(H H^T) - mu_{k_t+1}(H H^T)
//! ```
//!
//! `gamma_t` is `+inf` when nothing has been truncated before task `t`; every
//! term with `gamma_t` in a denominator is then zero.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::itsvd::{TruncatedFactorState, DEFAULT_MATERIALIZATION_CAP};
use crate::linalg::{self, Matrix, Vector};
use crate::solver::{classifier_from_factors, Learner, StepReport, TruncationPolicy};

/// Relative slack every comparison allows for rounding in the bound itself.
pub const BOUND_REL_TOL: f64 = 1e-9;

/// Power-iteration settings for implicit spectral norms.
pub const POWER_REL_TOL: f64 = 1e-8;
pub const POWER_MAX_ITER: usize = 1000;

/// What the ledger keeps for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub block_len: usize,
    pub samples: usize,
    pub rank: usize,
    /// `mu_{k_t}(B_t B_t^T)`, the smallest retained eigenvalue.
    pub mu_kept: f64,
    /// `mu_{k_t+1}(B_t B_t^T)`, the largest truncated eigenvalue (0 if none).
    pub mu_truncated: f64,
    /// All truncated eigenvalues `mu_{k_t+1}, ...`.
    pub truncated: Vec<f64>,
    pub a: f64,
    pub gamma: f64,
    /// Filled in by callers that can afford a batch spectrum.
    pub gap: Option<f64>,
}

/// Per-task truncation record.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TheoryLedger {
    records: Vec<TaskRecord>,
}

impl TheoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record of task `t` (1-based).
    pub fn record(&self, t: usize) -> Result<&TaskRecord> {
        t.checked_sub(1)
            .and_then(|i| self.records.get(i))
            .ok_or_else(|| Error::invalid_arg(format!("no record for task {t} (have {})", self.len())))
    }

    /// Appends task `t = len + 1` from the eigenvalues of `B_t B_t^T`
    /// (descending) and the rank kept.
    pub fn record_truncation(&mut self, gram_spectrum: &[f64], rank: usize, block_len: usize) -> Result<&TaskRecord> {
        if gram_spectrum.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid_input("spectrum must be sorted descending"));
        }
        if gram_spectrum.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid_input("spectrum has non-finite entries"));
        }
        if rank > gram_spectrum.len() {
            return Err(Error::invalid_arg(format!(
                "rank {rank} exceeds the spectrum length {}",
                gram_spectrum.len()
            )));
        }
        let truncated: Vec<f64> = gram_spectrum[rank..].iter().map(|x| x.max(0.0)).collect();
        let mu_truncated = truncated.first().copied().unwrap_or(0.0);
        let mu_kept = if rank > 0 { gram_spectrum[rank - 1].max(0.0) } else { 0.0 };
        let prev = self.records.last();
        let a = prev.map_or(0.0, |r| r.a) + mu_truncated;
        let samples = prev.map_or(0, |r| r.samples) + block_len;
        let gamma = if self.records.is_empty() {
            1.0
        } else {
            let worst = self.records.iter().map(|r| r.mu_truncated).fold(0.0, f64::max);
            if worst == 0.0 {
                f64::INFINITY
            } else {
                mu_kept / worst
            }
        };
        self.records.push(TaskRecord {
            task: self.records.len() + 1,
            block_len,
            samples,
            rank,
            mu_kept,
            mu_truncated,
            truncated,
            a,
            gamma,
            gap: None,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn record_step(&mut self, step: &StepReport) -> Result<&TaskRecord> {
        self.record_truncation(&step.update.gram_spectrum(), step.update.kept_rank, step.block_len)
    }

    /// `a_t`, with `a_0 = 0`.
    pub fn a(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(0.0);
        }
        Ok(self.record(t)?.a)
    }

    pub fn gamma(&self, t: usize) -> Result<f64> {
        Ok(self.record(t)?.gamma)
    }

    pub fn set_gap(&mut self, t: usize, gap: f64) -> Result<()> {
        self.record(t)?;
        self.records[t - 1].gap = Some(gap);
        Ok(())
    }

    /// Scalars entering the bounds at task `t`.
    pub fn terms(&self, t: usize) -> Result<BoundTerms> {
        let r = self.record(t)?;
        let (prev_samples, prev_rank) = if t >= 2 {
            let p = self.record(t - 1)?;
            (p.samples, p.rank)
        } else {
            (0, 0)
        };
        let pen = (prev_samples - prev_rank).min((t - 1) * r.rank);
        Ok(BoundTerms {
            t,
            samples: r.samples,
            rank: r.rank,
            a: r.a,
            a_prev: self.a(t - 1)?,
            gamma: r.gamma,
            pen,
            mu_kept: r.mu_kept,
            gap: r.gap,
        })
    }

    /// One CSV row per task.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,block_len,samples,rank,mu_kept,mu_truncated,a,gamma,gap\n");
        for r in &self.records {
            let gap = r.gap.map_or(String::new(), |g| g.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.task, r.block_len, r.samples, r.rank, r.mu_kept, r.mu_truncated, r.a, r.gamma, gap
            ));
        }
        out
    }
}

/// The scalars every bound is assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub t: usize,
    pub samples: usize,
    pub rank: usize,
    pub a: f64,
    pub a_prev: f64,
    pub gamma: f64,
    pub pen: usize,
    pub mu_kept: f64,
    pub gap: Option<f64>,
}

impl BoundTerms {
    /// `1 / gamma_t`, zero for the `+inf` sentinel.
    pub fn inv_gamma(&self) -> f64 {
        if self.gamma.is_infinite() {
            0.0
        } else {
            1.0 / self.gamma
        }
    }

    fn m(&self) -> f64 {
        self.samples as f64
    }

    fn tm1(&self) -> f64 {
        (self.t - 1) as f64
    }

    /// `a_t/M + a_{t-1}(t-1)/(gamma M) + a_{t-1}(t-1)^2/(gamma^2 M)`.
    pub fn fit_bracket(&self) -> f64 {
        let g = self.inv_gamma();
        let tm1 = self.tm1();
        (self.a + self.a_prev * tm1 * g + self.a_prev * tm1 * tm1 * g * g) / self.m()
    }

    /// `M - k + (t-1) pen / gamma^2`, the projection-error bound.
    pub fn projection_rhs(&self) -> f64 {
        let g = self.inv_gamma();
        (self.samples - self.rank) as f64 + self.tm1() * g * g * self.pen as f64
    }

    /// `(M - k)/M + (t-1) pen / (gamma^2 M)`.
    pub fn residual_noise_factor(&self) -> f64 {
        self.projection_rhs() / self.m()
    }

    /// `k/M + ((t-1)/(gamma^2 M) + 2/(gamma M)) pen`.
    pub fn fitted_noise_factor(&self) -> f64 {
        let g = self.inv_gamma();
        let m = self.m();
        self.rank as f64 / m + (self.tm1() * g * g / m + 2.0 * g / m) * self.pen as f64
    }

    /// Bias term of the test bound for a covariance error `lam = ||Lambda - H H^T / M||`.
    pub fn test_bias(&self, lam: f64) -> f64 {
        let g = self.inv_gamma();
        lam * (1.0 + self.tm1() * self.tm1() * g * g) + self.fit_bracket()
    }

    /// Variance term of the test bound.
    pub fn test_variance(&self, lam: f64) -> f64 {
        let g = self.inv_gamma();
        let spread = if lam == 0.0 {
            0.0
        } else {
            lam * (self.pen as f64 * g + self.rank as f64) / self.mu_kept
        };
        spread + self.fitted_noise_factor()
    }
}

/// Which bound a report is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    /// Exact recurrence `H H^T - U S^2 U^T = sum_i D_i`.
    Lemma1,
    /// Training MSE, deterministic noise.
    Thm1,
    /// Test MSE, deterministic noise.
    Thm2,
    /// Training MSE, Gaussian noise.
    Thm3,
    /// Distance to the noiseless fit on training data, Gaussian noise.
    Thm4,
    /// Test MSE, Gaussian noise.
    Thm5,
    /// Projection error `||H^T U S^-2 U^T H - I||_F^2`.
    Prop1,
    /// Singular-value drift against the batch SVD.
    Thm6Sigma,
    /// Subspace drift against the batch SVD.
    Thm6U,
    /// Offline vs online classifier distance.
    Thm7,
}

impl BoundKind {
    pub const ALL: [BoundKind; 10] = [
        BoundKind::Lemma1,
        BoundKind::Thm1,
        BoundKind::Thm2,
        BoundKind::Thm3,
        BoundKind::Thm4,
        BoundKind::Thm5,
        BoundKind::Prop1,
        BoundKind::Thm6Sigma,
        BoundKind::Thm6U,
        BoundKind::Thm7,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundKind::Lemma1 => "lemma1",
            BoundKind::Thm1 => "thm1",
            BoundKind::Thm2 => "thm2",
            BoundKind::Thm3 => "thm3",
            BoundKind::Thm4 => "thm4",
            BoundKind::Thm5 => "thm5",
            BoundKind::Prop1 => "prop1",
            BoundKind::Thm6Sigma => "thm6sigma",
            BoundKind::Thm6U => "thm6u",
            BoundKind::Thm7 => "thm7",
        }
    }
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BoundKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid_arg(format!("unknown bound '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundStatus {
    Checked,
    /// The bound's hypothesis does not hold; nothing is asserted.
    HypothesisNotMet,
}

/// One side-by-side comparison of a bound with the quantity it controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub which: BoundKind,
    pub task: usize,
    pub bound_value: f64,
    pub actual_value: f64,
    /// `actual <= bound (1 + 1e-9) + abs_tol`; always true when the
    /// hypothesis is not met.
    pub satisfied: bool,
    /// `bound - actual`.
    pub slack: f64,
    pub status: BoundStatus,
    /// Absolute allowance for rounding in the actual side (or Monte-Carlo error).
    pub abs_tol: f64,
    /// Standard error of a Monte-Carlo actual side.
    pub standard_error: Option<f64>,
}

impl BoundReport {
    pub fn compare(which: BoundKind, task: usize, bound: f64, actual: f64, abs_tol: f64) -> Self {
        Self {
            which,
            task,
            bound_value: bound,
            actual_value: actual,
            satisfied: actual <= bound * (1.0 + BOUND_REL_TOL) + abs_tol,
            slack: bound - actual,
            status: BoundStatus::Checked,
            abs_tol,
            standard_error: None,
        }
    }

    pub fn not_applicable(which: BoundKind, task: usize, bound: f64, actual: f64) -> Self {
        Self {
            which,
            task,
            bound_value: bound,
            actual_value: actual,
            satisfied: true,
            slack: bound - actual,
            status: BoundStatus::HypothesisNotMet,
            abs_tol: 0.0,
            standard_error: None,
        }
    }

    fn with_standard_error(mut self, se: f64) -> Self {
        self.standard_error = Some(se);
        self
    }

    pub fn is_checked(&self) -> bool {
        self.status == BoundStatus::Checked
    }

    /// Checked and violated.
    pub fn is_violation(&self) -> bool {
        self.is_checked() && !self.satisfied
    }
}

/// Low-rank factor `V diag(w) V^T` of one truncation remainder `D_i`.
#[derive(Debug, Clone)]
struct Remainder {
    v: Matrix,
    w: Vector,
}

/// Drives a learner while keeping everything the dense diagnostics need:
/// every block, every intermediate state and each truncation remainder
/// `D_i = B_i B_i^T - tau_{k_i}(B_i B_i^T)` computed by an independent batch
/// SVD of `B_i`.
#[derive(Debug, Clone)]
pub struct StreamRecorder {
    learner: Learner,
    ledger: TheoryLedger,
    blocks: Vec<Matrix>,
    targets: Vec<Matrix>,
    labels: Vec<Vec<u32>>,
    states: Vec<TruncatedFactorState>,
    remainders: Vec<Remainder>,
    cap: usize,
}

impl StreamRecorder {
    pub fn new(dim: usize, policy: TruncationPolicy) -> Result<Self> {
        Self::with_cap(dim, policy, DEFAULT_MATERIALIZATION_CAP)
    }

    pub fn with_cap(dim: usize, policy: TruncationPolicy, cap: usize) -> Result<Self> {
        if dim > cap {
            return Err(Error::SizeCap { dim, cap });
        }
        Ok(Self {
            learner: Learner::new(dim, policy)?,
            ledger: TheoryLedger::new(),
            blocks: Vec::new(),
            targets: Vec::new(),
            labels: Vec::new(),
            states: Vec::new(),
            remainders: Vec::new(),
            cap,
        })
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn ledger(&self) -> &TheoryLedger {
        &self.ledger
    }

    pub fn tasks(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.learner.dim()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn observe_targets(&mut self, h: &Matrix, y: &Matrix) -> Result<&TaskRecord> {
        let b = self.next_b(h)?;
        let step = self.learner.observe_targets(h, y)?;
        self.targets.push(y.clone());
        self.after_step(h, b, &step)
    }

    pub fn observe_labels(&mut self, h: &Matrix, labels: &[u32]) -> Result<&TaskRecord> {
        let b = self.next_b(h)?;
        let step = self.learner.observe_labels(h, labels)?;
        self.labels.push(labels.to_vec());
        self.after_step(h, b, &step)
    }

    fn next_b(&self, h: &Matrix) -> Result<Matrix> {
        match self.learner.state() {
            None => Ok(h.clone()),
            Some(s) => s.next_b(h),
        }
    }

    fn after_step(&mut self, h: &Matrix, b: Matrix, step: &StepReport) -> Result<&TaskRecord> {
        let k = step.update.kept_rank;
        let f = linalg::svd(&b, false)?;
        let tail = f.s.len().saturating_sub(k);
        let v = f.u.columns(k, tail).into_owned();
        let w = Vector::from_iterator(tail, f.s.iter().skip(k).map(|s| s * s));
        self.remainders.push(Remainder { v, w });

        self.blocks.push(h.clone());
        self.states
            .push(self.learner.state().expect("state after observe").clone());
        self.ledger.record_step(step)?;

        let t = self.tasks();
        let batch = linalg::singular_values(&self.h_upto(t)?)?;
        let mu = |j: usize| batch.get(j).map_or(0.0, |s| s * s);
        let gap = if k == 0 { 0.0 } else { mu(k - 1) - mu(k) };
        self.ledger.set_gap(t, gap)?;
        self.ledger.record(t)
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.tasks() {
            return Err(Error::invalid_arg(format!(
                "task {t} outside 1..={}",
                self.tasks()
            )));
        }
        Ok(())
    }

    /// `H_{1:t}`.
    pub fn h_upto(&self, t: usize) -> Result<Matrix> {
        self.check_task(t)?;
        let cols: usize = self.blocks[..t].iter().map(|b| b.ncols()).sum();
        let mut out = Matrix::zeros(self.dim(), cols);
        let mut at = 0;
        for b in &self.blocks[..t] {
            out.columns_mut(at, b.ncols()).copy_from(b);
            at += b.ncols();
        }
        Ok(out)
    }

    /// `Y_{1:t}` with rows padded to the widest block.
    pub fn y_upto(&self, t: usize) -> Result<Matrix> {
        self.check_task(t)?;
        if !self.labels.is_empty() {
            let mut ids = crate::solver::ClassMap::new();
            let all: Vec<u32> = self.labels[..t].iter().flatten().copied().collect();
            return Ok(crate::baselines::one_hot(&all, &mut ids));
        }
        let rows = self.targets[..t].iter().map(|y| y.nrows()).max().unwrap_or(0);
        let cols: usize = self.targets[..t].iter().map(|y| y.ncols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for y in &self.targets[..t] {
            out.view_mut((0, at), (y.nrows(), y.ncols())).copy_from(y);
            at += y.ncols();
        }
        Ok(out)
    }

    pub fn state_at(&self, t: usize) -> Result<&TruncatedFactorState> {
        self.check_task(t)?;
        Ok(&self.states[t - 1])
    }

    /// `sum_{i<=t} D_i`, dense.
    pub fn remainder_sum(&self, t: usize) -> Result<Matrix> {
        self.check_task(t)?;
        let mut d = Matrix::zeros(self.dim(), self.dim());
        for r in &self.remainders[..t] {
            let mut vw = r.v.clone();
            linalg::scale_columns(&mut vw, r.w.as_slice());
            d.gemm(1.0, &vw, &r.v.transpose(), 1.0);
        }
        Ok(d)
    }

    /// `||H H^T - U S^2 U^T - sum_i D_i||_F / ||H H^T||_F` after task `t`.
    pub fn lemma1_residual(&self, t: usize) -> Result<f64> {
        let h = self.h_upto(t)?;
        let gram = linalg::gram_rows(&h);
        let low = self.state_at(t)?.lowrank_gram(self.cap)?;
        let d = self.remainder_sum(t)?;
        let scale = gram.norm();
        let resid = (&gram - low - d).norm();
        Ok(if scale == 0.0 { resid } else { resid / scale })
    }

    pub fn lemma1_report(&self, t: usize, tol: f64) -> Result<BoundReport> {
        let r = self.lemma1_residual(t)?;
        Ok(BoundReport::compare(BoundKind::Lemma1, t, tol, r, 0.0))
    }

    /// Continual classifier `Y H^T U S^-2 U^T` after task `t` for targets `y`.
    pub fn classifier_for(&self, t: usize, y: &Matrix) -> Result<Matrix> {
        let h = self.h_upto(t)?;
        if y.ncols() != h.ncols() {
            return Err(Error::invalid_arg("targets do not match the stream length"));
        }
        let s = self.state_at(t)?;
        classifier_from_factors(&(y * h.transpose()), s.u(), s.singular_values())
    }

    /// `H^T U S^-2 U^T` after task `t`; the continual classifier is `Y` times this.
    pub fn fit_operator(&self, t: usize) -> Result<Matrix> {
        let h = self.h_upto(t)?;
        let s = self.state_at(t)?;
        let mut hu = h.tr_mul(s.u());
        let inv: Vec<f64> = s.singular_values().iter().map(|x| 1.0 / (x * x)).collect();
        linalg::scale_columns(&mut hu, &inv);
        Ok(hu * s.u().transpose())
    }
}

/// `||Lambda - H H^T / M||` with `Lambda` the second moment of `pool`'s columns.
pub fn lambda_gap_norm(pool: &Matrix, h: &Matrix) -> Result<f64> {
    if pool.ncols() == 0 {
        return Err(Error::invalid_arg("empty holdout pool"));
    }
    if h.ncols() == 0 {
        return Err(Error::invalid_arg("no training samples"));
    }
    linalg::gram_difference_norm(pool, 1.0 / pool.ncols() as f64, h, 1.0 / h.ncols() as f64)
}

/// Same quantity by power iteration, never forming an `E x E` matrix.
pub fn lambda_gap_norm_iterative(pool: &Matrix, h: &Matrix, seed: u64) -> Result<linalg::PowerIteration> {
    if pool.ncols() == 0 {
        return Err(Error::invalid_arg("empty holdout pool"));
    }
    if pool.nrows() != h.nrows() {
        return Err(Error::invalid_arg("pool and training features differ in dimension"));
    }
    let wp = 1.0 / pool.ncols() as f64;
    let wh = 1.0 / h.ncols().max(1) as f64;
    let apply = |x: &Vector| -> Vector {
        let a = pool * (pool.tr_mul(x)) * wp;
        let b = h * (h.tr_mul(x)) * wh;
        a - b
    };
    Ok(linalg::power_iteration_norm(pool.nrows(), apply, POWER_REL_TOL, POWER_MAX_ITER, seed))
}

/// Rounding allowance for an actual side whose natural scale is `scale`.
fn floor(scale: f64) -> f64 {
    1e-10 * scale
}

/// Training-MSE bound for deterministic noise. `noise = Y - W* H`.
pub fn eval_training_bound(terms: &BoundTerms, w_star: &Matrix, noise: &Matrix, h: &Matrix, y: &Matrix, w: &Matrix) -> Result<BoundReport> {
    let m = h.ncols() as f64;
    let noise_norm = linalg::spectral_norm(noise)?;
    let bound = 4.0 * w_star.norm_squared() * terms.fit_bracket()
        + 2.0 * noise_norm * noise_norm * terms.residual_noise_factor();
    let actual = (w * h - y).norm_squared() / m;
    let scale = y.norm_squared() / m;
    Ok(BoundReport::compare(BoundKind::Thm1, terms.t, bound, actual, floor(scale)))
}

/// Monte-Carlo mean and standard error of `||(W - W*) h_i - eps_i||^2` over the pool.
pub fn monte_carlo_test_mse(w: &Matrix, w_star: &Matrix, pool: &Matrix, eps: &Matrix) -> Result<(f64, f64)> {
    let n = pool.ncols();
    if n == 0 {
        return Err(Error::invalid_arg("empty holdout pool"));
    }
    if eps.ncols() != n || eps.nrows() != w.nrows() {
        return Err(Error::invalid_arg("test noise does not match the pool"));
    }
    let c = w.nrows();
    let mut diff = w.clone();
    {
        let mut top = diff.rows_mut(0, w_star.nrows().min(c));
        top -= w_star.rows(0, w_star.nrows().min(c));
    }
    let r = &diff * pool - eps;
    let losses: Vec<f64> = r.column_iter().map(|c| c.norm_squared()).collect();
    let mean = losses.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok((mean, (var / n as f64).sqrt()))
}

/// Inputs of the deterministic-noise test bound.
#[derive(Debug, Clone)]
pub struct TestBoundInputs<'a> {
    pub terms: BoundTerms,
    pub w_star: &'a Matrix,
    /// Training noise `Y - W* H`.
    pub train_noise: &'a Matrix,
    /// Training features `H_{1:t}`.
    pub h: &'a Matrix,
    /// Held-out features; their second moment stands in for `Lambda`.
    pub pool: &'a Matrix,
    /// Test noise, one column per pool sample.
    pub pool_noise: &'a Matrix,
    /// `E ||eps||^2`.
    pub noise_second_moment: f64,
    /// Continual classifier.
    pub w: &'a Matrix,
}

/// Test-MSE bound for deterministic training noise; the comparison allows
/// three Monte-Carlo standard errors.
pub fn eval_test_bound(inp: &TestBoundInputs<'_>) -> Result<BoundReport> {
    let lam = lambda_gap_norm(inp.pool, inp.h)?;
    let noise_norm = linalg::spectral_norm(inp.train_noise)?;
    let bound = 4.0 * inp.w_star.norm_squared() * inp.terms.test_bias(lam)
        + 4.0 * noise_norm * noise_norm * inp.terms.test_variance(lam)
        + 2.0 * inp.noise_second_moment;
    let (mean, se) = monte_carlo_test_mse(inp.w, inp.w_star, inp.pool, inp.pool_noise)?;
    Ok(BoundReport::compare(BoundKind::Thm2, inp.terms.t, bound, mean, 3.0 * se).with_standard_error(se))
}

/// Inputs of the Gaussian-noise bounds.
#[derive(Debug, Clone)]
pub struct GaussianBoundInputs<'a> {
    pub terms: BoundTerms,
    pub w_star: &'a Matrix,
    /// Training features `H_{1:t}`.
    pub h: &'a Matrix,
    /// `H^T U S^-2 U^T` from the recorder; the classifier for targets `Y` is `Y` times this.
    pub fit_operator: &'a Matrix,
    pub pool: &'a Matrix,
    pub nu: f64,
    pub draws: usize,
    pub seed: u64,
}

/// Gaussian-noise training, fitted-value and test bounds, with the actual
/// sides averaged over `draws` independent noise draws. Each comparison
/// allows three standard errors of the mean.
pub fn eval_gaussian_bounds(inp: &GaussianBoundInputs<'_>) -> Result<[BoundReport; 3]> {
    if !(inp.nu >= 0.0) || !inp.nu.is_finite() {
        return Err(Error::invalid_arg(format!("noise level must be non-negative, got {}", inp.nu)));
    }
    if inp.draws == 0 {
        return Err(Error::invalid_arg("at least one noise draw is needed"));
    }
    let t = inp.terms.t;
    let c = inp.w_star.nrows() as f64;
    let m = inp.h.ncols() as f64;
    let nu2 = inp.nu * inp.nu;
    let wf2 = inp.w_star.norm_squared();
    let lam = lambda_gap_norm(inp.pool, inp.h)?;

    let clean = inp.w_star * inp.h;
    let mut rng = ChaCha20Rng::seed_from_u64(inp.seed);
    let mut gauss = |rows: usize, cols: usize| -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            inp.nu * z
        })
    };
    let (mut s3, mut s4, mut s5) = (0.0, 0.0, 0.0);
    let (mut q3, mut q4, mut q5) = (0.0, 0.0, 0.0);
    for _ in 0..inp.draws {
        let y = &clean + gauss(clean.nrows(), clean.ncols());
        let w = &y * inp.fit_operator;
        let fitted = &w * inp.h;
        let v3 = (&fitted - &y).norm_squared() / m;
        let v4 = (&fitted - &clean).norm_squared() / m;
        let eps = gauss(clean.nrows(), inp.pool.ncols());
        let (v5, _) = monte_carlo_test_mse(&w, inp.w_star, inp.pool, &eps)?;
        s3 += v3;
        s4 += v4;
        s5 += v5;
        q3 += v3 * v3;
        q4 += v4 * v4;
        q5 += v5 * v5;
    }
    let n = inp.draws as f64;
    let se = |s: f64, q: f64| -> f64 {
        if inp.draws < 2 {
            return 0.0;
        }
        let mean = s / n;
        (((q - n * mean * mean) / (n - 1.0)).max(0.0) / n).sqrt()
    };
    let scale = clean.norm_squared() / m + c * nu2;

    let b3 = 2.0 * wf2 * inp.terms.fit_bracket() + c * nu2 * inp.terms.residual_noise_factor();
    let b4 = 2.0 * wf2 * inp.terms.fit_bracket() + c * nu2 * inp.terms.fitted_noise_factor();
    let b5 = 2.0 * wf2 * inp.terms.test_bias(lam) + c * nu2 * inp.terms.test_variance(lam) + c * nu2;
    let report = |kind, bound, s: f64, q: f64| {
        let se = se(s, q);
        BoundReport::compare(kind, t, bound, s / n, floor(scale) + 3.0 * se).with_standard_error(se)
    };
    Ok([
        report(BoundKind::Thm3, b3, s3, q3),
        report(BoundKind::Thm4, b4, s4, q4),
        report(BoundKind::Thm5, b5, s5, q5),
    ])
}

/// `||H^T U S^-2 U^T H - I||_F^2` against `M - k + (t-1) pen / gamma^2`.
pub fn eval_projection_bound(terms: &BoundTerms, h: &Matrix, state: &TruncatedFactorState, cap: usize) -> Result<BoundReport> {
    let m = h.ncols();
    if m > cap {
        return Err(Error::SizeCap { dim: m, cap });
    }
    let lhs = projection_error(h, state);
    Ok(BoundReport::compare(
        BoundKind::Prop1,
        terms.t,
        terms.projection_rhs(),
        lhs,
        floor(m as f64),
    ))
}

/// `||H^T U S^-2 U^T H - I||_F^2`, dense.
pub fn projection_error(h: &Matrix, state: &TruncatedFactorState) -> f64 {
    let mut g = state.u().tr_mul(h);
    for (mut row, s) in g.row_iter_mut().zip(state.singular_values().iter()) {
        row /= *s;
    }
    let p = g.tr_mul(&g);
    (p - Matrix::identity(h.ncols(), h.ncols())).norm_squared()
}

/// Drift of the continual factors from the batch top-`k` SVD of `H_{1:t}`.
///
/// The singular-value check always applies. The subspace check applies
/// when `a_{t-1} < (1 - 1/sqrt 2) gap_t`; its actual side is
/// `||(I - Ub Ub^T) U||`, the sine of the largest principal angle.
pub fn eval_factor_drift(terms: &BoundTerms, h: &Matrix, state: &TruncatedFactorState) -> Result<[BoundReport; 2]> {
    let k = state.rank();
    let t = terms.t;
    let batch = linalg::svd(h, false)?;
    let top = batch.s.iter().copied().next().unwrap_or(0.0);
    let mu_max = top * top;
    let mut drift: f64 = 0.0;
    for j in 0..k {
        let bar = batch.s.get(j).copied().unwrap_or(0.0);
        let tilde = state.singular_values()[j];
        drift = drift.max((bar * bar - tilde * tilde).abs());
    }
    let sigma = BoundReport::compare(BoundKind::Thm6Sigma, t, terms.a_prev, drift, 1e-9 * mu_max);

    let gap = terms.gap.unwrap_or(0.0);
    let ub = batch.u.columns(0, k.min(batch.u.ncols()));
    let resid = state.u() - &ub * ub.tr_mul(state.u());
    let angle = linalg::spectral_norm(&resid)?;
    let hypothesis = terms.a_prev < (1.0 - std::f64::consts::FRAC_1_SQRT_2) * gap;
    let u = if hypothesis {
        let bound = std::f64::consts::SQRT_2 * terms.a_prev / gap;
        BoundReport::compare(BoundKind::Thm6U, t, bound, angle, 1e-9 * mu_max / gap)
    } else {
        let bound = if gap > 0.0 {
            std::f64::consts::SQRT_2 * terms.a_prev / gap
        } else {
            f64::INFINITY
        };
        BoundReport::not_applicable(BoundKind::Thm6U, t, bound, angle)
    };
    Ok([sigma, u])
}

/// `||W_offline - W_online||_F` against `||W*||_F (sqrt2 a_{t-1}/gap_t + (t-1)/gamma_t)`.
///
/// `mu_max` is the largest eigenvalue of `H H^T` and only scales the
/// rounding allowance.
pub fn eval_offline_online_distance(terms: &BoundTerms, w_offline: &Matrix, w_online: &Matrix, w_star: &Matrix, mu_max: f64) -> Result<BoundReport> {
    if w_offline.shape() != w_online.shape() {
        return Err(Error::invalid_arg("classifiers differ in shape"));
    }
    let actual = (w_offline - w_online).norm();
    let gap = terms.gap.unwrap_or(0.0);
    let ws = w_star.norm();
    let hypothesis = terms.a_prev < (1.0 - std::f64::consts::FRAC_1_SQRT_2) * gap;
    let tail = (terms.t - 1) as f64 * terms.inv_gamma();
    if !hypothesis {
        let bound = if gap > 0.0 {
            ws * (std::f64::consts::SQRT_2 * terms.a_prev / gap + tail)
        } else {
            f64::INFINITY
        };
        return Ok(BoundReport::not_applicable(BoundKind::Thm7, terms.t, bound, actual));
    }
    let bound = ws * (std::f64::consts::SQRT_2 * terms.a_prev / gap + tail);
    Ok(BoundReport::compare(BoundKind::Thm7, terms.t, bound, actual, 1e-9 * ws * mu_max / gap))
}

/// One row of a spectrum dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    /// 1-based index.
    pub index: usize,
    pub eigenvalue: f64,
    /// `sum_{j>=k} mu_j / mu_k`; NaN when `mu_k = 0`.
    pub effective_rank: f64,
}

/// Sorted Gram eigenvalues with effective ranks.
pub fn spectrum_rows(eigenvalues: &[f64]) -> Vec<SpectrumRow> {
    let mut sorted = eigenvalues.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut tail = vec![0.0; sorted.len() + 1];
    for j in (0..sorted.len()).rev() {
        tail[j] = tail[j + 1] + sorted[j];
    }
    sorted
        .iter()
        .enumerate()
        .map(|(j, &mu)| SpectrumRow {
            index: j + 1,
            eigenvalue: mu,
            effective_rank: if mu == 0.0 { f64::NAN } else { tail[j] / mu },
        })
        .collect()
}

/// Eigenvalues of `H H^T` (the squared singular values of `H`).
pub fn gram_spectrum(h: &Matrix) -> Result<Vec<f64>> {
    Ok(linalg::singular_values(h)?.iter().map(|s| s * s).collect())
}

/// Eigenvalues `S^2` of the state's low-rank Gram.
pub fn state_spectrum(state: &TruncatedFactorState) -> Vec<f64> {
    state.singular_values().iter().map(|s| s * s).collect()
}

pub fn spectrum_csv(rows: &[SpectrumRow]) -> String {
    let mut out = String::from("index,eigenvalue,effective_rank\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.index, r.eigenvalue, r.effective_rank));
    }
    out
}

pub fn parse_spectrum_csv(text: &str) -> Result<Vec<SpectrumRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::invalid_input(format!("malformed spectrum line {}: {line}", n + 1));
        let mut it = line.split(',');
        let index = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let eigenvalue = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let effective_rank = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        rows.push(SpectrumRow {
            index,
            eigenvalue,
            effective_rank,
        });
    }
    Ok(rows)
}
