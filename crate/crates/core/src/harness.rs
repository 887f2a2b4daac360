//! Class- and domain-incremental experiment driver.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{NcmClassifier, RidgeConfig, RidgeLearner};
use crate::error::{Error, Result};
use crate::io::FeatureFile;
use crate::linalg::{self, Matrix};
use crate::solver::{ClassifierWeights, Learner, StepReport, TruncationPolicy};
use crate::theory::TheoryLedger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Cil,
    Dil,
}

/// `B<q1>-Inc<q2>`: `q1` classes in the first task (0 means `q2`), `q2` after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub q1: usize,
    pub q2: usize,
    pub order_seed: u64,
    #[serde(default)]
    pub mode: Mode,
}

impl Protocol {
    pub fn new(q1: usize, q2: usize, order_seed: u64) -> Result<Self> {
        if q2 == 0 {
            return Err(Error::invalid_arg("q2 must be at least 1"));
        }
        Ok(Self {
            q1,
            q2,
            order_seed,
            mode: Mode::Cil,
        })
    }

    /// Domain-incremental: one task per domain, shared classes.
    pub fn dil() -> Self {
        Self {
            q1: 0,
            q2: 1,
            order_seed: 0,
            mode: Mode::Dil,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.order_seed = seed;
        self
    }

    /// Per-task class counts for a dataset with `classes` classes.
    ///
    /// A final task smaller than `q2` takes any remainder.
    pub fn task_sizes(&self, classes: usize) -> Result<Vec<usize>> {
        if self.q2 == 0 {
            return Err(Error::invalid_arg("q2 must be at least 1"));
        }
        let first = if self.q1 == 0 { self.q2 } else { self.q1 };
        let needed = if self.q1 == 0 { self.q2 } else { self.q1 + self.q2 };
        if classes < needed {
            return Err(Error::invalid_arg(format!(
                "protocol {self} needs at least {needed} classes, dataset has {classes}"
            )));
        }
        let mut sizes = vec![first];
        let mut left = classes - first;
        while left > 0 {
            let n = left.min(self.q2);
            sizes.push(n);
            left -= n;
        }
        Ok(sizes)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            Mode::Cil => write!(f, "B{}-Inc{}", self.q1, self.q2),
            Mode::Dil => write!(f, "DIL"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("dil") {
            return Ok(Protocol::dil());
        }
        let bad = || Error::Config(format!("protocol `{s}` is not of the form B<q1>-Inc<q2>"));
        let (b, inc) = t.split_once('-').ok_or_else(bad)?;
        let q1 = b.strip_prefix('B').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let q2 = inc.strip_prefix("Inc").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        Protocol::new(q1, q2, 0).map_err(|e| Error::Config(e.to_string()))
    }
}

/// One step of a stream: the task's training block and its test split.
#[derive(Debug, Clone)]
pub struct Task {
    pub index: usize,
    pub classes: Vec<u32>,
    pub train: FeatureFile,
    pub test: FeatureFile,
}

/// Dataset classes in a seeded uniformly random order.
pub fn class_order(classes: &[u32], seed: u64) -> Vec<u32> {
    let mut c = classes.to_vec();
    c.sort_unstable();
    c.dedup();
    c.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    c
}

/// Class lists of each task, in stream order; each list is sorted.
pub fn task_classes(labels: &[u32], protocol: &Protocol) -> Result<Vec<Vec<u32>>> {
    let order = class_order(labels, protocol.order_seed);
    let sizes = protocol.task_sizes(order.len())?;
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for n in sizes {
        let mut classes = order[at..at + n].to_vec();
        at += n;
        classes.sort_unstable();
        out.push(classes);
    }
    Ok(out)
}

/// Sample indices of each task, in file order within a task.
pub fn stream_indices(labels: &[u32], protocol: &Protocol) -> Result<Vec<Vec<usize>>> {
    Ok(task_classes(labels, protocol)?
        .iter()
        .map(|cls| (0..labels.len()).filter(|&i| cls.binary_search(&labels[i]).is_ok()).collect())
        .collect())
}

/// Splits a labelled dataset into class-disjoint tasks.
pub fn build_stream(train: &FeatureFile, test: &FeatureFile, protocol: &Protocol) -> Result<Vec<Task>> {
    if protocol.mode == Mode::Dil {
        return build_dil_stream(&[(train.clone(), test.clone())]);
    }
    if train.dim() != test.dim() {
        return Err(Error::invalid_arg(format!(
            "train dimension {} differs from test dimension {}",
            train.dim(),
            test.dim()
        )));
    }
    Ok(task_classes(&train.labels, protocol)?
        .into_iter()
        .enumerate()
        .map(|(index, classes)| Task {
            index,
            train: train.select_classes(&classes),
            test: test.select_classes(&classes),
            classes,
        })
        .collect())
}

/// One task per `(train, test)` domain pair, in the given order.
pub fn build_dil_stream(domains: &[(FeatureFile, FeatureFile)]) -> Result<Vec<Task>> {
    if domains.is_empty() {
        return Err(Error::invalid_arg("no domains given"));
    }
    let dim = domains[0].0.dim();
    domains
        .iter()
        .enumerate()
        .map(|(index, (tr, te))| {
            if tr.dim() != dim || te.dim() != dim {
                return Err(Error::invalid_arg(format!("domain {index} has a different feature dimension")));
            }
            if tr.is_empty() {
                return Err(Error::invalid_arg(format!("domain {index} has no training samples")));
            }
            Ok(Task {
                index,
                classes: tr.classes(),
                train: tr.clone(),
                test: te.clone(),
            })
        })
        .collect()
}

/// `A[i][t]`: accuracy on task `i` after learning task `t`, for `i <= t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    t: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            t: tasks,
            cells: vec![None; tasks * tasks],
        }
    }

    /// Builds a complete matrix from its upper triangle, given row by row.
    pub fn from_upper(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        let mut a = Self::new(t);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != t - i {
                return Err(Error::invalid_arg(format!("row {i} needs {} entries", t - i)));
            }
            for (k, &v) in row.iter().enumerate() {
                a.set(i, i + k, v)?;
            }
        }
        Ok(a)
    }

    pub fn tasks(&self) -> usize {
        self.t
    }

    pub fn set(&mut self, i: usize, t: usize, acc: f64) -> Result<()> {
        if i > t || t >= self.t {
            return Err(Error::invalid_arg(format!("cell ({i}, {t}) is outside the upper triangle")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::invalid_arg(format!("accuracy {acc} is outside [0, 1]")));
        }
        self.cells[i * self.t + t] = Some(acc);
        Ok(())
    }

    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        if i >= self.t || t >= self.t {
            return None;
        }
        self.cells[i * self.t + t]
    }

    pub fn is_complete(&self) -> bool {
        (0..self.t).all(|t| (0..=t).all(|i| self.get(i, t).is_some()))
    }

    fn require_complete(&self) -> Result<()> {
        if self.t == 0 || !self.is_complete() {
            return Err(Error::InvalidState("accuracy matrix is incomplete".into()));
        }
        Ok(())
    }

    /// Mean of the last column.
    pub fn final_accuracy(&self) -> Result<f64> {
        self.require_complete()?;
        let last = self.t - 1;
        Ok((0..self.t).map(|i| self.get(i, last).unwrap()).sum::<f64>() / self.t as f64)
    }

    /// Mean over all `T (T + 1) / 2` upper-triangular entries.
    pub fn total_accuracy(&self) -> Result<f64> {
        self.require_complete()?;
        let mut sum = 0.0;
        for t in 0..self.t {
            for i in 0..=t {
                sum += self.get(i, t).unwrap();
            }
        }
        Ok(sum / (self.t * (self.t + 1) / 2) as f64)
    }

    /// Rows are evaluated tasks, columns are training steps; lower cells are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task");
        for t in 0..self.t {
            s.push_str(&format!(",after_{}", t + 1));
        }
        s.push('\n');
        for i in 0..self.t {
            s.push_str(&(i + 1).to_string());
            for t in 0..self.t {
                s.push(',');
                if let Some(v) = self.get(i, t) {
                    s.push_str(&format!("{v}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Something that labels a block of samples.
pub trait Predictor {
    fn predict_block(&self, h: &Matrix) -> Result<Vec<u32>>;

    /// Linear weights, when the predictor has them.
    fn weights(&self) -> Option<&ClassifierWeights> {
        None
    }
}

impl Predictor for ClassifierWeights {
    fn predict_block(&self, h: &Matrix) -> Result<Vec<u32>> {
        ClassifierWeights::predict_block(self, h)
    }

    fn weights(&self) -> Option<&ClassifierWeights> {
        Some(self)
    }
}

impl Predictor for NcmClassifier {
    fn predict_block(&self, h: &Matrix) -> Result<Vec<u32>> {
        NcmClassifier::predict_block(self, h)
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn predict_block(&self, h: &Matrix) -> Result<Vec<u32>> {
        (**self).predict_block(h)
    }

    fn weights(&self) -> Option<&ClassifierWeights> {
        (**self).weights()
    }
}

/// A learner the harness can drive task by task.
pub trait ContinualLearner {
    fn name(&self) -> &str;

    /// Learns one task. Learners backed by truncated factors return their step report.
    fn observe_task(&mut self, h: &Matrix, labels: &[u32]) -> Result<Option<StepReport>>;

    /// A snapshot classifier for the tasks seen so far.
    fn predictor(&self) -> Result<Box<dyn Predictor + '_>>;
}

impl ContinualLearner for Learner {
    fn name(&self) -> &str {
        "loranpac"
    }

    fn observe_task(&mut self, h: &Matrix, labels: &[u32]) -> Result<Option<StepReport>> {
        self.observe_labels(h, labels).map(Some)
    }

    fn predictor(&self) -> Result<Box<dyn Predictor + '_>> {
        Ok(Box::new(self.classifier()?))
    }
}

impl ContinualLearner for RidgeLearner {
    fn name(&self) -> &str {
        "ranpac"
    }

    fn observe_task(&mut self, h: &Matrix, labels: &[u32]) -> Result<Option<StepReport>> {
        self.observe_labels(h, labels).map(|_| None)
    }

    fn predictor(&self) -> Result<Box<dyn Predictor + '_>> {
        Ok(Box::new(self.fit()?.weights))
    }
}

impl ContinualLearner for NcmClassifier {
    fn name(&self) -> &str {
        "ncm"
    }

    fn observe_task(&mut self, h: &Matrix, labels: &[u32]) -> Result<Option<StepReport>> {
        self.observe_labels(h, labels).map(|_| None)
    }

    fn predictor(&self) -> Result<Box<dyn Predictor + '_>> {
        Ok(Box::new(self))
    }
}

/// Wraps a learner under a different reported name.
pub struct Named<L> {
    pub name: String,
    pub inner: L,
}

impl<L: ContinualLearner> ContinualLearner for Named<L> {
    fn name(&self) -> &str {
        &self.name
    }

    fn observe_task(&mut self, h: &Matrix, labels: &[u32]) -> Result<Option<StepReport>> {
        self.inner.observe_task(h, labels)
    }

    fn predictor(&self) -> Result<Box<dyn Predictor + '_>> {
        self.inner.predictor()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Loranpac,
    Minnorm,
    Ranpac,
    Ncm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Loranpac, Method::Minnorm, Method::Ranpac, Method::Ncm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Loranpac => "loranpac",
            Method::Minnorm => "minnorm",
            Method::Ranpac => "ranpac",
            Method::Ncm => "ncm",
        }
    }

    /// `minnorm` is the incremental solver with nothing truncated.
    pub fn build(self, dim: usize, policy: TruncationPolicy, ridge: &RidgeConfig) -> Result<Box<dyn ContinualLearner>> {
        Ok(match self {
            Method::Loranpac => Box::new(Learner::new(dim, policy)?),
            Method::Minnorm => Box::new(Named {
                name: "minnorm".into(),
                inner: Learner::new(dim, TruncationPolicy::full_rank())?,
            }),
            Method::Ranpac => Box::new(RidgeLearner::new(dim, ridge.clone())?),
            Method::Ncm => Box::new(NcmClassifier::new(dim)),
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (loranpac, minnorm, ranpac, ncm)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Observe,
    Classify,
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub task: usize,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub rank: Option<usize>,
    /// `||W H - Y||_F^2 / M` over all training data seen so far, one-hot targets.
    pub train_mse: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub train_mse: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: String,
    pub accuracy: AccuracyMatrix,
    pub ledger: Option<TheoryLedger>,
    pub steps: Vec<TaskSummary>,
    pub failures: Vec<TaskFailure>,
}

impl RunOutcome {
    pub fn final_accuracy(&self) -> Result<f64> {
        self.accuracy.final_accuracy()
    }

    pub fn total_accuracy(&self) -> Result<f64> {
        self.accuracy.total_accuracy()
    }

    /// Training MSE after the last task, if tracked and available.
    pub fn final_train_mse(&self) -> Option<f64> {
        self.steps.last().and_then(|s| s.train_mse)
    }
}

/// Fraction of `predicted` equal to `truth`; 0 for an empty set.
pub fn accuracy(predicted: &[u32], truth: &[u32]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

fn one_hot_for(weights: &ClassifierWeights, labels: &[u32]) -> Matrix {
    let ids = weights.classes();
    let mut y = Matrix::zeros(weights.matrix().nrows(), labels.len());
    for (j, l) in labels.iter().enumerate() {
        if let Some(r) = ids.iter().position(|c| c == l) {
            y[(r, j)] = 1.0;
        }
    }
    y
}

/// `||W H - Y||_F^2 / M` for one-hot `Y` over the classifier's class rows.
pub fn training_mse(weights: &ClassifierWeights, h: &Matrix, labels: &[u32]) -> Result<f64> {
    if h.ncols() == 0 {
        return Err(Error::invalid_arg("no samples"));
    }
    let r = weights.matrix() * h - one_hot_for(weights, labels);
    Ok(linalg::frobenius_norm(&r).powi(2) / h.ncols() as f64)
}

/// Trains on `tasks` in order, filling column `t` of the accuracy matrix after task `t`.
///
/// A failing step does not stop the run: its evaluations are recorded as 0.
pub fn run(tasks: &[Task], learner: &mut dyn ContinualLearner, opts: RunOptions) -> Result<RunOutcome> {
    if tasks.is_empty() {
        return Err(Error::invalid_arg("empty task stream"));
    }
    let n = tasks.len();
    let mut acc = AccuracyMatrix::new(n);
    let mut ledger: Option<TheoryLedger> = None;
    let mut steps = Vec::with_capacity(n);
    let mut failures = Vec::new();
    let mut seen_h: Option<Matrix> = None;
    let mut seen_labels: Vec<u32> = Vec::new();

    for (t, task) in tasks.iter().enumerate() {
        let mut rank = None;
        match learner.observe_task(&task.train.features, &task.train.labels) {
            Ok(Some(step)) => {
                rank = Some(step.rank());
                ledger.get_or_insert_with(TheoryLedger::new).record_step(&step)?;
            }
            Ok(None) => {}
            Err(e) => failures.push(TaskFailure {
                task: t,
                stage: Stage::Observe,
                message: e.to_string(),
            }),
        }
        if opts.train_mse {
            seen_h = Some(match seen_h.take() {
                None => task.train.features.clone(),
                Some(h) => linalg::hcat(&h, &task.train.features)?,
            });
            seen_labels.extend_from_slice(&task.train.labels);
        }

        let mut train_mse = None;
        match learner.predictor() {
            Ok(p) => {
                for (i, past) in tasks[..=t].iter().enumerate() {
                    let a = match p.predict_block(&past.test.features) {
                        Ok(pred) => accuracy(&pred, &past.test.labels),
                        Err(e) => {
                            failures.push(TaskFailure {
                                task: t,
                                stage: Stage::Evaluate,
                                message: format!("task {}: {e}", i + 1),
                            });
                            0.0
                        }
                    };
                    acc.set(i, t, a)?;
                }
                if let (Some(w), Some(h)) = (p.weights(), seen_h.as_ref()) {
                    train_mse = training_mse(w, h, &seen_labels).ok();
                }
            }
            Err(e) => {
                failures.push(TaskFailure {
                    task: t,
                    stage: Stage::Classify,
                    message: e.to_string(),
                });
                for i in 0..=t {
                    acc.set(i, t, 0.0)?;
                }
            }
        }
        steps.push(TaskSummary {
            task: t,
            classes: task.classes.len(),
            train_samples: task.train.len(),
            test_samples: task.test.len(),
            rank,
            train_mse,
        });
    }
    Ok(RunOutcome {
        method: learner.name().to_string(),
        accuracy: acc,
        ledger,
        steps,
        failures,
    })
}
