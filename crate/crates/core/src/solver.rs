//! The continual LoRanPAC learner.
//!
//! Per task the learner updates the truncated factors of the running feature
//! matrix, accumulates the label-feature covariance `J = Y H^T`, and on
//! request forms the classifier `W = J U diag(S^-2) U^T`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{fnv1a64, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::itsvd::{TruncatedFactorState, UpdateReport};
use crate::lift::FeatureBlock;
use crate::linalg::{self, Matrix, Vector};

/// Classifier formation refuses singular values below this fraction of the largest.
pub const CLASSIFIER_FLOOR: f64 = 1e-14;

pub const DEFAULT_ZETA: f64 = 0.25;
pub const DEFAULT_RMAX: usize = 10_000;

/// Truncation percentage `zeta` and rank cap `r_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub zeta: f64,
    pub r_max: usize,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            zeta: DEFAULT_ZETA,
            r_max: DEFAULT_RMAX,
        }
    }
}

impl TruncationPolicy {
    /// `zeta` must lie in `[0, 1)`; `zeta = 1` would keep nothing.
    pub fn new(zeta: f64, r_max: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&zeta) {
            return Err(Error::invalid_arg(format!(
                "truncation percentage must lie in [0, 1), got {zeta}"
            )));
        }
        if r_max == 0 {
            return Err(Error::invalid_arg("r_max must be at least 1"));
        }
        Ok(Self { zeta, r_max })
    }

    /// No truncation and no cap: the plain incremental min-norm solver.
    pub fn full_rank() -> Self {
        Self {
            zeta: 0.0,
            r_max: usize::MAX,
        }
    }

    pub fn schedule_k(&self, dim: usize, samples: usize) -> usize {
        schedule_k(self, dim, samples)
    }
}

/// `min(r_max, ceil((1 - zeta) * min(E, M)))`, at least 1.
pub fn schedule_k(policy: &TruncationPolicy, dim: usize, samples: usize) -> usize {
    let base = dim.min(samples) as f64;
    let x = (1.0 - policy.zeta) * base;
    // (1 - 0.1) * 10 is 9.000000000000002 in binary; don't let that round up
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (k as usize).min(policy.r_max).max(1)
}

/// Global class ids in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassMap {
    ids: Vec<u32>,
    index: HashMap<u32, usize>,
}

impl ClassMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        let mut map = Self::new();
        for id in ids {
            if map.index.contains_key(&id) {
                return Err(Error::InvalidState(format!("class {id} listed twice")));
            }
            map.insert(id);
        }
        Ok(map)
    }

    /// Row of `label`, assigning the next row if it is new.
    pub fn insert(&mut self, label: u32) -> usize {
        let next = self.ids.len();
        let row = *self.index.entry(label).or_insert(next);
        if row == next {
            self.ids.push(label);
        }
        row
    }

    pub fn row(&self, label: u32) -> Option<usize> {
        self.index.get(&label).copied()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `J = Y H^T`, one row per class, grown by zero rows as classes appear.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFeatureCovariance {
    j: Matrix,
}

impl LabelFeatureCovariance {
    pub fn new(dim: usize) -> Self {
        Self {
            j: Matrix::zeros(0, dim),
        }
    }

    pub fn from_matrix(j: Matrix) -> Self {
        Self { j }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.j
    }

    pub fn classes(&self) -> usize {
        self.j.nrows()
    }

    pub fn dim(&self) -> usize {
        self.j.ncols()
    }

    /// Adds `h_i^T` to row `rows[i]` for every column `i` of `h`.
    pub fn accumulate(&mut self, rows: &[usize], h: &Matrix) -> Result<()> {
        if h.nrows() != self.dim() {
            return Err(Error::invalid_arg(format!(
                "block has {} rows, covariance dimension is {}",
                h.nrows(),
                self.dim()
            )));
        }
        if rows.len() != h.ncols() {
            return Err(Error::invalid_arg(format!(
                "{} row indices for {} samples",
                rows.len(),
                h.ncols()
            )));
        }
        if let Some(&top) = rows.iter().max() {
            self.grow_to(top + 1);
        }
        for (col, &row) in h.column_iter().zip(rows) {
            let mut target = self.j.row_mut(row);
            target += col.transpose();
        }
        Ok(())
    }

    /// Adds `Y H^T` for dense targets; `Y` may have more rows than seen so far.
    pub fn accumulate_dense(&mut self, y: &Matrix, h: &Matrix) -> Result<()> {
        if h.nrows() != self.dim() {
            return Err(Error::invalid_arg(format!(
                "block has {} rows, covariance dimension is {}",
                h.nrows(),
                self.dim()
            )));
        }
        if y.ncols() != h.ncols() {
            return Err(Error::invalid_arg(format!(
                "{} targets for {} samples",
                y.ncols(),
                h.ncols()
            )));
        }
        self.grow_to(y.nrows());
        let mut top = self.j.rows_mut(0, y.nrows());
        top.gemm(1.0, y, &h.transpose(), 1.0);
        Ok(())
    }

    fn grow_to(&mut self, rows: usize) {
        let have = self.j.nrows();
        if rows > have {
            let j = std::mem::replace(&mut self.j, Matrix::zeros(0, 0));
            self.j = j.insert_rows(have, rows - have, 0.0);
        }
    }
}

/// Linear read-out `W` (classes x E) with the class id of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    w: Matrix,
    classes: Vec<u32>,
    tasks: usize,
}

impl ClassifierWeights {
    pub fn new(w: Matrix, classes: Vec<u32>, tasks: usize) -> Result<Self> {
        if w.nrows() != classes.len() {
            return Err(Error::invalid_arg(format!(
                "{} weight rows for {} classes",
                w.nrows(),
                classes.len()
            )));
        }
        linalg::check_finite(&w)?;
        Ok(Self { w, classes, tasks })
    }

    /// Rows labelled `0..c` in order.
    pub fn dense(w: Matrix) -> Result<Self> {
        let classes = (0..w.nrows() as u32).collect();
        Self::new(w, classes, 0)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    pub fn into_matrix(self) -> Matrix {
        self.w
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    /// `W h`.
    pub fn scores(&self, h: &[f64]) -> Result<Vector> {
        if h.len() != self.dim() {
            return Err(Error::invalid_arg(format!(
                "sample has {} features, classifier expects {}",
                h.len(),
                self.dim()
            )));
        }
        Ok(&self.w * Vector::from_column_slice(h))
    }

    /// Row index of the largest score; ties go to the lowest row.
    pub fn predict_row(&self, h: &[f64]) -> Result<usize> {
        let s = self.scores(h)?;
        argmax(s.as_slice()).ok_or_else(|| Error::InvalidState("classifier has no classes".into()))
    }

    pub fn predict(&self, h: &[f64]) -> Result<u32> {
        Ok(self.classes[self.predict_row(h)?])
    }

    /// Per-column predictions; identical to calling [`Self::predict`] on each column.
    pub fn predict_block(&self, h: &Matrix) -> Result<Vec<u32>> {
        h.column_iter()
            .map(|c| self.predict(c.as_slice()))
            .collect()
    }
}

/// First index of the maximum; `None` for an empty slice or all-NaN input.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        if x.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// `J U diag(S^-2) U^T`, guarded by [`CLASSIFIER_FLOOR`].
pub fn classifier_from_factors(j: &Matrix, u: &Matrix, s: &Vector) -> Result<Matrix> {
    if j.ncols() != u.nrows() || u.ncols() != s.len() {
        return Err(Error::invalid_arg(format!(
            "shape mismatch: J is {}x{}, U is {}x{}, S has {}",
            j.nrows(),
            j.ncols(),
            u.nrows(),
            u.ncols(),
            s.len()
        )));
    }
    if s.is_empty() {
        return Ok(Matrix::zeros(j.nrows(), j.ncols()));
    }
    let smax = s.max();
    let smin = s.min();
    let floor = CLASSIFIER_FLOOR * smax;
    if !(smin >= floor) || smax <= 0.0 {
        return Err(Error::IllConditioned { smallest: smin, floor });
    }
    let mut ju = j * u;
    let inv: Vec<f64> = s.iter().map(|x| 1.0 / (x * x)).collect();
    linalg::scale_columns(&mut ju, &inv);
    Ok(ju * u.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TargetMode {
    Labels,
    Dense,
}

/// What one call to `observe` did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    /// 1-based task index.
    pub task: usize,
    pub block_len: usize,
    pub samples_seen: usize,
    pub classes: usize,
    pub update: UpdateReport,
}

impl StepReport {
    pub fn rank(&self) -> usize {
        self.update.kept_rank
    }
}

/// The continual learner: factors, covariance, class map and policy.
#[derive(Debug, Clone)]
pub struct Learner {
    policy: TruncationPolicy,
    dim: usize,
    state: Option<TruncatedFactorState>,
    cov: LabelFeatureCovariance,
    classes: ClassMap,
    mode: Option<TargetMode>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"LRPC";
const CHECKPOINT_VERSION: u32 = 1;

impl Learner {
    pub fn new(dim: usize, policy: TruncationPolicy) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid_arg("feature dimension must be positive"));
        }
        TruncationPolicy::new(policy.zeta, policy.r_max)?;
        Ok(Self {
            policy,
            dim,
            state: None,
            cov: LabelFeatureCovariance::new(dim),
            classes: ClassMap::new(),
            mode: None,
        })
    }

    pub fn policy(&self) -> &TruncationPolicy {
        &self.policy
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self) -> Option<&TruncatedFactorState> {
        self.state.as_ref()
    }

    pub fn covariance(&self) -> &LabelFeatureCovariance {
        &self.cov
    }

    pub fn class_ids(&self) -> Vec<u32> {
        match self.mode {
            Some(TargetMode::Dense) => (0..self.cov.classes() as u32).collect(),
            _ => self.classes.ids().to_vec(),
        }
    }

    pub fn tasks_seen(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.tasks_seen())
    }

    pub fn samples_seen(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.samples_seen())
    }

    /// Rank the next block of `m` samples would be truncated to.
    pub fn next_rank(&self, m: usize) -> usize {
        let samples = self.samples_seen() + m;
        let k = self.policy.schedule_k(self.dim, samples);
        match &self.state {
            None => k.min(m),
            Some(s) => k.min(s.rank() + m),
        }
    }

    fn absorb(&self, h: &Matrix) -> Result<(TruncatedFactorState, UpdateReport)> {
        if h.nrows() != self.dim {
            return Err(Error::invalid_arg(format!(
                "block has {} rows, learner dimension is {}",
                h.nrows(),
                self.dim
            )));
        }
        if h.ncols() == 0 {
            return Err(Error::invalid_arg("empty block"));
        }
        let k = self.next_rank(h.ncols());
        match &self.state {
            None => TruncatedFactorState::init(h, k),
            Some(s) => s.update(h, k),
        }
    }

    fn check_mode(&self, mode: TargetMode) -> Result<()> {
        match self.mode {
            Some(m) if m != mode => Err(Error::InvalidState(
                "a learner cannot mix labelled and dense-target blocks".into(),
            )),
            _ => Ok(()),
        }
    }

    fn report(&self, update: UpdateReport, block_len: usize) -> StepReport {
        StepReport {
            task: self.tasks_seen(),
            block_len,
            samples_seen: self.samples_seen(),
            classes: self.cov.classes(),
            update,
        }
    }

    pub fn observe(&mut self, block: &FeatureBlock) -> Result<StepReport> {
        self.observe_labels(&block.h, &block.labels)
    }

    /// Absorbs a block with one class label per column.
    pub fn observe_labels(&mut self, h: &Matrix, labels: &[u32]) -> Result<StepReport> {
        self.check_mode(TargetMode::Labels)?;
        if labels.len() != h.ncols() {
            return Err(Error::invalid_arg(format!(
                "{} labels for {} samples",
                labels.len(),
                h.ncols()
            )));
        }
        linalg::check_finite(h)?;
        let (state, update) = self.absorb(h)?;
        let mut classes = self.classes.clone();
        let rows: Vec<usize> = labels.iter().map(|&l| classes.insert(l)).collect();
        let mut cov = self.cov.clone();
        cov.accumulate(&rows, h)?;

        self.state = Some(state);
        self.cov = cov;
        self.classes = classes;
        self.mode = Some(TargetMode::Labels);
        Ok(self.report(update, h.ncols()))
    }

    /// Absorbs a block with dense targets `Y` (rows are outputs, columns samples).
    pub fn observe_targets(&mut self, h: &Matrix, y: &Matrix) -> Result<StepReport> {
        self.check_mode(TargetMode::Dense)?;
        linalg::check_finite(h)?;
        linalg::check_finite(y)?;
        let mut cov = self.cov.clone();
        cov.accumulate_dense(y, h)?;
        let (state, update) = self.absorb(h)?;

        self.state = Some(state);
        self.cov = cov;
        self.mode = Some(TargetMode::Dense);
        Ok(self.report(update, h.ncols()))
    }

    /// `W = J U diag(S^-2) U^T` for the current state.
    pub fn classifier(&self) -> Result<ClassifierWeights> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::InvalidState("no task observed yet".into()))?;
        let w = classifier_from_factors(self.cov.matrix(), state.u(), state.singular_values())?;
        ClassifierWeights::new(w, self.class_ids(), state.tasks_seen())
    }

    /// Serializes the learner into the versioned checkpoint container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = ByteWriter::new();
        p.f64(self.policy.zeta);
        p.u64(self.policy.r_max as u64);
        p.usize(self.dim);
        p.u8(match self.mode {
            None => 0,
            Some(TargetMode::Labels) => 1,
            Some(TargetMode::Dense) => 2,
        });
        p.usize(self.classes.len());
        for &id in self.classes.ids() {
            p.u32(id);
        }
        p.matrix(self.cov.matrix());
        match &self.state {
            None => p.u8(0),
            Some(s) => {
                p.u8(1);
                p.matrix(s.u());
                p.vector(s.singular_values());
                p.usize(s.samples_seen());
                p.usize(s.k_history().len());
                for &k in s.k_history() {
                    p.usize(k);
                }
            }
        }
        let payload = p.into_inner();
        let mut out = ByteWriter::with_capacity(payload.len() + 24);
        out.bytes(CHECKPOINT_MAGIC);
        out.u32(CHECKPOINT_VERSION);
        out.usize(payload.len());
        out.bytes(&payload);
        out.u64(fnv1a64(&payload));
        out.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let at = r.offset();
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let len = r.count(1)?;
        let start = r.offset();
        let payload = r.take(len)?;
        let at = r.offset();
        let sum = r.u64()?;
        r.finish()?;
        if fnv1a64(payload) != sum {
            return Err(Error::format(at, "checkpoint checksum mismatch"));
        }

        let mut p = ByteReader::with_base(payload, start);
        let zeta = p.f64()?;
        let r_max = p.u64()?;
        let policy = TruncationPolicy {
            zeta,
            r_max: usize::try_from(r_max).unwrap_or(usize::MAX),
        };
        let dim = p.usize()?;
        let at = p.offset();
        let mode = match p.u8()? {
            0 => None,
            1 => Some(TargetMode::Labels),
            2 => Some(TargetMode::Dense),
            m => return Err(Error::format(at, format!("unknown target mode {m}"))),
        };
        let nclasses = p.count(4)?;
        let ids = (0..nclasses).map(|_| p.u32()).collect::<Result<Vec<_>>>()?;
        let classes = ClassMap::from_ids(ids)?;
        let at = p.offset();
        let j = p.matrix()?;
        if j.ncols() != dim {
            return Err(Error::format(at, "covariance width does not match the dimension"));
        }
        if mode == Some(TargetMode::Labels) && j.nrows() != classes.len() {
            return Err(Error::format(at, "covariance rows do not match the class map"));
        }
        let at = p.offset();
        let state = match p.u8()? {
            0 => None,
            1 => {
                let u = p.matrix()?;
                let s = p.vector()?;
                let samples = p.usize()?;
                let n = p.count(8)?;
                let hist = (0..n).map(|_| p.usize()).collect::<Result<Vec<_>>>()?;
                if u.nrows() != dim {
                    return Err(Error::format(at, "factor height does not match the dimension"));
                }
                Some(TruncatedFactorState::from_parts(u, s, samples, hist)?)
            }
            f => return Err(Error::format(at, format!("unknown state flag {f}"))),
        };
        p.finish()?;
        let mut learner = Self::new(dim, policy)?;
        learner.state = state;
        learner.cov = LabelFeatureCovariance::from_matrix(j);
        learner.classes = classes;
        learner.mode = mode;
        Ok(learner)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
