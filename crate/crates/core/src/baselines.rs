//! Reference solvers run on the same features as the continual learner.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::solver::{
    argmax, classifier_from_factors, ClassMap, ClassifierWeights, LabelFeatureCovariance, Learner,
    TruncationPolicy,
};

/// Singular values below this fraction of the largest are dropped by the pseudoinverse.
pub const PINV_FLOOR: f64 = 1e-12;

/// One-hot targets (classes x samples) with rows in first-appearance order.
pub fn one_hot(labels: &[u32], classes: &mut ClassMap) -> Matrix {
    let rows: Vec<usize> = labels.iter().map(|&l| classes.insert(l)).collect();
    let mut y = Matrix::zeros(classes.len(), labels.len());
    for (col, &row) in rows.iter().enumerate() {
        y[(row, col)] = 1.0;
    }
    y
}

fn check_targets(h: &Matrix, y: &Matrix) -> Result<()> {
    if y.ncols() != h.ncols() {
        return Err(Error::invalid_arg(format!(
            "{} targets for {} samples",
            y.ncols(),
            h.ncols()
        )));
    }
    if h.ncols() == 0 {
        return Err(Error::invalid_arg("no samples"));
    }
    linalg::check_finite(h)?;
    linalg::check_finite(y)
}

/// `Y H^+`, the minimum-Frobenius-norm least-squares solution.
pub fn minnorm_offline(h: &Matrix, y: &Matrix) -> Result<ClassifierWeights> {
    check_targets(h, y)?;
    let f = linalg::svd(h, true)?;
    let v = f.v.expect("requested right factors");
    let top = f.s.iter().copied().fold(0.0, f64::max);
    let r = f.s.iter().take_while(|&&x| x > PINV_FLOOR * top).count();
    let mut yv = y * v.columns(0, r);
    let inv: Vec<f64> = f.s.iter().take(r).map(|x| 1.0 / x).collect();
    linalg::scale_columns(&mut yv, &inv);
    ClassifierWeights::dense(yv * f.u.columns(0, r).transpose())
}

/// Continual learner with no truncation: the incremental-SVD min-norm solver.
pub fn minnorm_continual(dim: usize) -> Result<Learner> {
    Learner::new(dim, TruncationPolicy::full_rank())
}

/// `Y H^T U_k diag(S_k^-2) U_k^T` from the top-`k` batch SVD of `H`.
pub fn truncated_offline(h: &Matrix, y: &Matrix, k: usize) -> Result<ClassifierWeights> {
    check_targets(h, y)?;
    let f = linalg::truncated_svd(h, k)?;
    let j = y * h.transpose();
    ClassifierWeights::dense(classifier_from_factors(&j, &f.u, &f.s)?)
}

/// `10^-8, 10^-7, ..., 10^8`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-8..=8).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    pub lambda_grid: Vec<f64>,
    pub holdout_fraction: f64,
    pub fixed_lambda: Option<f64>,
    pub split_seed: u64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            lambda_grid: default_lambda_grid(),
            holdout_fraction: 0.1,
            fixed_lambda: None,
            split_seed: 0,
        }
    }
}

impl RidgeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |l: &f64| l.is_finite() && *l > 0.0;
        match self.fixed_lambda {
            Some(l) if !positive(&l) => {
                return Err(Error::invalid_arg(format!("ridge penalty must be positive, got {l}")))
            }
            Some(_) => {}
            None if self.lambda_grid.is_empty() => {
                return Err(Error::invalid_arg("empty lambda grid and no fixed lambda"))
            }
            None => {}
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !positive(l)) {
            return Err(Error::invalid_arg(format!("ridge penalty must be positive, got {l}")));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::invalid_arg(format!(
                "holdout fraction must lie in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// Solves `W (G + lambda I) = J` by Cholesky.
pub fn ridge_solve(gram: &Matrix, j: &Matrix, lambda: f64) -> Result<Matrix> {
    if gram.nrows() != gram.ncols() || gram.nrows() != j.ncols() {
        return Err(Error::invalid_arg("ridge system has inconsistent shapes"));
    }
    let mut a = gram.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let chol = a.cholesky().ok_or_else(|| {
        Error::Numeric(format!("Cholesky factorization failed for lambda = {lambda:e}"))
    })?;
    Ok(chol.solve(&j.transpose()).transpose())
}

/// Ridge weights `Y H^T (H H^T + lambda I)^-1`.
pub fn ridge_weights(h: &Matrix, y: &Matrix, lambda: f64) -> Result<Matrix> {
    check_targets(h, y)?;
    ridge_solve(&linalg::gram_rows(h), &(y * h.transpose()), lambda)
}

/// `||W (H H^T + lambda I) - Y H^T||_F / ||Y H^T||_F`.
pub fn normal_equation_residual(w: &Matrix, h: &Matrix, y: &Matrix, lambda: f64) -> f64 {
    let j = y * h.transpose();
    let lhs = (w * h) * h.transpose() + w * lambda;
    let denom = j.norm();
    if denom == 0.0 {
        (lhs - &j).norm()
    } else {
        (lhs - &j).norm() / denom
    }
}

/// Per-class shuffled split; each class with at least two samples sends
/// `max(1, floor(fraction * n_c))` of them to the holdout side.
pub fn stratified_split(labels: &[u32], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = ClassMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        let row = order.insert(l);
        if row == groups.len() {
            groups.push(Vec::new());
        }
        groups[row].push(i);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for mut g in groups {
        g.shuffle(&mut rng);
        let n_hold = if g.len() >= 2 {
            ((fraction * g.len() as f64).floor() as usize).clamp(1, g.len() - 1)
        } else {
            0
        };
        hold.extend_from_slice(&g[..n_hold]);
        train.extend_from_slice(&g[n_hold..]);
    }
    train.sort_unstable();
    hold.sort_unstable();
    (train, hold)
}

fn select_columns(h: &Matrix, idx: &[usize]) -> Matrix {
    h.select_columns(idx)
}

fn accuracy(w: &ClassifierWeights, h: &Matrix, labels: &[u32]) -> Result<f64> {
    let pred = w.predict_block(h)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct RidgeFit {
    pub weights: ClassifierWeights,
    pub lambda: f64,
    /// `(lambda, holdout accuracy)` for every grid point tried, in grid order.
    pub holdout_scores: Vec<(f64, f64)>,
}

/// Picks the first grid point with the highest score.
fn select_lambda(scores: &[(f64, f64)]) -> f64 {
    let accs: Vec<f64> = scores.iter().map(|s| s.1).collect();
    scores[argmax(&accs).unwrap_or(0)].0
}

/// Batch ridge regression with holdout selection of `lambda`; the final
/// weights are refit on all samples.
pub fn ridge_fit(h: &Matrix, labels: &[u32], cfg: &RidgeConfig) -> Result<RidgeFit> {
    cfg.validate()?;
    let mut classes = ClassMap::new();
    let y = one_hot(labels, &mut classes);
    check_targets(h, &y)?;
    let ids = classes.ids().to_vec();

    let (lambda, scores) = match cfg.fixed_lambda {
        Some(l) => (l, Vec::new()),
        None => {
            let (tr, ho) = stratified_split(labels, cfg.holdout_fraction, cfg.split_seed);
            if ho.is_empty() {
                return Err(Error::invalid_arg(
                    "holdout split is empty; every class needs at least two samples",
                ));
            }
            let h_tr = select_columns(h, &tr);
            let y_tr = select_columns(&y, &tr);
            let h_ho = select_columns(h, &ho);
            let l_ho: Vec<u32> = ho.iter().map(|&i| labels[i]).collect();
            let gram = linalg::gram_rows(&h_tr);
            let j = &y_tr * h_tr.transpose();
            let mut scores = Vec::with_capacity(cfg.lambda_grid.len());
            for &l in &cfg.lambda_grid {
                let w = ClassifierWeights::new(ridge_solve(&gram, &j, l)?, ids.clone(), 1)?;
                scores.push((l, accuracy(&w, &h_ho, &l_ho)?));
            }
            (select_lambda(&scores), scores)
        }
    };
    let w = ridge_weights(h, &y, lambda)?;
    Ok(RidgeFit {
        weights: ClassifierWeights::new(w, ids, 1)?,
        lambda,
        holdout_scores: scores,
    })
}

fn pad_rows(m: &Matrix, rows: usize) -> Matrix {
    if m.nrows() >= rows {
        return m.clone();
    }
    m.clone().insert_rows(m.nrows(), rows - m.nrows(), 0.0)
}

/// Continual ridge: keeps `H H^T` and `Y H^T` split into a fitting part and
/// a holdout part, plus the holdout samples themselves for scoring `lambda`.
#[derive(Debug, Clone)]
pub struct RidgeLearner {
    cfg: RidgeConfig,
    dim: usize,
    classes: ClassMap,
    gram_fit: Matrix,
    gram_hold: Matrix,
    j_fit: LabelFeatureCovariance,
    j_hold: LabelFeatureCovariance,
    hold_h: Matrix,
    hold_labels: Vec<u32>,
    tasks: usize,
}

impl RidgeLearner {
    pub fn new(dim: usize, cfg: RidgeConfig) -> Result<Self> {
        cfg.validate()?;
        if dim == 0 {
            return Err(Error::invalid_arg("feature dimension must be positive"));
        }
        Ok(Self {
            cfg,
            dim,
            classes: ClassMap::new(),
            gram_fit: Matrix::zeros(dim, dim),
            gram_hold: Matrix::zeros(dim, dim),
            j_fit: LabelFeatureCovariance::new(dim),
            j_hold: LabelFeatureCovariance::new(dim),
            hold_h: Matrix::zeros(dim, 0),
            hold_labels: Vec::new(),
            tasks: 0,
        })
    }

    pub fn tasks_seen(&self) -> usize {
        self.tasks
    }

    pub fn observe_labels(&mut self, h: &Matrix, labels: &[u32]) -> Result<()> {
        if h.nrows() != self.dim {
            return Err(Error::invalid_arg(format!(
                "block has {} rows, learner dimension is {}",
                h.nrows(),
                self.dim
            )));
        }
        if labels.len() != h.ncols() || h.ncols() == 0 {
            return Err(Error::invalid_arg("label count must match a non-empty block"));
        }
        linalg::check_finite(h)?;
        let seed = self.cfg.split_seed.wrapping_add(self.tasks as u64);
        let (tr, ho) = stratified_split(labels, self.cfg.holdout_fraction, seed);
        let rows: Vec<usize> = labels.iter().map(|&l| self.classes.insert(l)).collect();

        let h_tr = select_columns(h, &tr);
        let r_tr: Vec<usize> = tr.iter().map(|&i| rows[i]).collect();
        self.gram_fit += linalg::gram_rows(&h_tr);
        self.j_fit.accumulate(&r_tr, &h_tr)?;
        if !ho.is_empty() {
            let h_ho = select_columns(h, &ho);
            let r_ho: Vec<usize> = ho.iter().map(|&i| rows[i]).collect();
            self.gram_hold += linalg::gram_rows(&h_ho);
            self.j_hold.accumulate(&r_ho, &h_ho)?;
            self.hold_h = linalg::hcat(&self.hold_h, &h_ho)?;
            self.hold_labels.extend(ho.iter().map(|&i| labels[i]));
        }
        self.tasks += 1;
        Ok(())
    }

    /// Selects `lambda` on the stored holdout samples and refits on everything.
    pub fn fit(&self) -> Result<RidgeFit> {
        if self.tasks == 0 {
            return Err(Error::InvalidState("no task observed yet".into()));
        }
        let c = self.classes.len();
        let ids = self.classes.ids().to_vec();
        let j_fit = pad_rows(self.j_fit.matrix(), c);
        let (lambda, scores) = match self.cfg.fixed_lambda {
            Some(l) => (l, Vec::new()),
            None => {
                if self.hold_labels.is_empty() {
                    return Err(Error::invalid_arg(
                        "holdout split is empty; every class needs at least two samples",
                    ));
                }
                let mut scores = Vec::with_capacity(self.cfg.lambda_grid.len());
                for &l in &self.cfg.lambda_grid {
                    let w = ClassifierWeights::new(ridge_solve(&self.gram_fit, &j_fit, l)?, ids.clone(), self.tasks)?;
                    scores.push((l, accuracy(&w, &self.hold_h, &self.hold_labels)?));
                }
                (select_lambda(&scores), scores)
            }
        };
        let gram = &self.gram_fit + &self.gram_hold;
        let j = j_fit + pad_rows(self.j_hold.matrix(), c);
        let w = ridge_solve(&gram, &j, lambda)?;
        Ok(RidgeFit {
            weights: ClassifierWeights::new(w, ids, self.tasks)?,
            lambda,
            holdout_scores: scores,
        })
    }
}

/// Nearest class mean under cosine similarity.
#[derive(Debug, Clone)]
pub struct NcmClassifier {
    dim: usize,
    classes: ClassMap,
    sums: LabelFeatureCovariance,
    counts: Vec<usize>,
}

impl NcmClassifier {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            classes: ClassMap::new(),
            sums: LabelFeatureCovariance::new(dim),
            counts: Vec::new(),
        }
    }

    pub fn observe_labels(&mut self, h: &Matrix, labels: &[u32]) -> Result<()> {
        if h.nrows() != self.dim {
            return Err(Error::invalid_arg(format!(
                "block has {} rows, classifier dimension is {}",
                h.nrows(),
                self.dim
            )));
        }
        if labels.len() != h.ncols() {
            return Err(Error::invalid_arg("label count must match the block"));
        }
        linalg::check_finite(h)?;
        let rows: Vec<usize> = labels.iter().map(|&l| self.classes.insert(l)).collect();
        self.sums.accumulate(&rows, h)?;
        self.counts.resize(self.classes.len(), 0);
        for r in rows {
            self.counts[r] += 1;
        }
        Ok(())
    }

    pub fn class_ids(&self) -> &[u32] {
        self.classes.ids()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Class means, one row per class.
    pub fn means(&self) -> Matrix {
        let mut m = pad_rows(self.sums.matrix(), self.classes.len());
        for (r, &n) in self.counts.iter().enumerate() {
            if n > 0 {
                let mut row = m.row_mut(r);
                row /= n as f64;
            }
        }
        m
    }

    fn predict_with(&self, means: &Matrix, norms: &[f64], h: &[f64]) -> Result<u32> {
        if h.len() != self.dim {
            return Err(Error::invalid_arg(format!(
                "sample has {} features, classifier expects {}",
                h.len(),
                self.dim
            )));
        }
        let hv = nalgebra::DVector::from_column_slice(h);
        let hn = hv.norm();
        let mut best: Option<(usize, f64)> = None;
        for r in 0..means.nrows() {
            if self.counts[r] == 0 {
                continue;
            }
            let sim = if hn == 0.0 || norms[r] == 0.0 {
                0.0
            } else {
                means.row(r).transpose().dot(&hv) / (norms[r] * hn)
            };
            match best {
                Some((_, b)) if sim <= b => {}
                _ => best = Some((r, sim)),
            }
        }
        best.map(|(r, _)| self.classes.ids()[r])
            .ok_or_else(|| Error::InvalidState("no class observed yet".into()))
    }

    pub fn predict(&self, h: &[f64]) -> Result<u32> {
        let means = self.means();
        let norms: Vec<f64> = means.row_iter().map(|r| r.norm()).collect();
        self.predict_with(&means, &norms, h)
    }

    pub fn predict_block(&self, h: &Matrix) -> Result<Vec<u32>> {
        let means = self.means();
        let norms: Vec<f64> = means.row_iter().map(|r| r.norm()).collect();
        h.column_iter()
            .map(|c| self.predict_with(&means, &norms, c.as_slice()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn minnorm_identity() {
        let y = gaussian(3, 4, 1);
        let w = minnorm_offline(&Matrix::identity(4, 4), &y).unwrap();
        assert!((w.matrix() - &y).norm() < 1e-12);
    }

    #[test]
    fn minnorm_rank_one() {
        let u = Matrix::from_column_slice(3, 1, &[1.0, 2.0, 2.0]);
        let v = Matrix::from_column_slice(2, 1, &[0.6, 0.8]);
        let h = &u * v.transpose();
        let w = minnorm_offline(&h, &v.transpose()).unwrap();
        let expect = u.transpose() / 9.0;
        assert!((w.matrix() - expect).norm() < 1e-12);
    }

    #[test]
    fn truncated_annihilates_dropped_direction() {
        let h = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![10.0, 1e-6]));
        let y = gaussian(2, 2, 3);
        let w = truncated_offline(&h, &y, 1).unwrap();
        assert!(w.matrix().column(1).norm() == 0.0);
        assert!(truncated_offline(&h, &y, 3).is_err());
    }

    #[test]
    fn ridge_scalar() {
        let w = ridge_weights(&Matrix::identity(3, 3), &Matrix::identity(3, 3), 1.0).unwrap();
        assert!((w - Matrix::identity(3, 3) * 0.5).norm() < 1e-15);
    }

    #[test]
    fn split_is_stratified() {
        let labels: Vec<u32> = (0..50).map(|i| (i % 5) as u32).collect();
        let (tr, ho) = stratified_split(&labels, 0.1, 4);
        assert_eq!(tr.len() + ho.len(), 50);
        assert_eq!(ho.len(), 5);
        let mut seen: Vec<u32> = ho.iter().map(|&i| labels[i]).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(stratified_split(&labels, 0.1, 4), (tr, ho));
        let (tr, ho) = stratified_split(&[1, 2, 3], 0.1, 0);
        assert_eq!((tr.len(), ho.len()), (3, 0));
    }

    #[test]
    fn config_validation() {
        assert!(RidgeConfig::default().validate().is_ok());
        let mut c = RidgeConfig::default();
        c.lambda_grid.clear();
        assert!(c.validate().is_err());
        c.fixed_lambda = Some(1.0);
        assert!(c.validate().is_ok());
        c.fixed_lambda = Some(0.0);
        assert!(c.validate().is_err());
        let c = RidgeConfig {
            holdout_fraction: 1.0,
            ..RidgeConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn ncm_tie_goes_low() {
        let mut n = NcmClassifier::new(2);
        n.observe_labels(&Matrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]), &[4, 2])
            .unwrap();
        assert_eq!(n.predict(&[1.0, 1.0]).unwrap(), 4);
        assert_eq!(n.predict(&[0.0, 0.0]).unwrap(), 4);
        assert_eq!(n.predict(&[0.1, 3.0]).unwrap(), 2);
        assert!(NcmClassifier::new(2).predict(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn ncm_means() {
        let h = gaussian(4, 9, 2);
        let labels = [0, 1, 0, 2, 1, 0, 2, 2, 2];
        let mut n = NcmClassifier::new(4);
        n.observe_labels(&h.columns(0, 5).into_owned(), &labels[..5]).unwrap();
        n.observe_labels(&h.columns(5, 4).into_owned(), &labels[5..]).unwrap();
        let m = n.means();
        for (r, &c) in n.class_ids().iter().enumerate() {
            let idx: Vec<usize> = (0..9).filter(|&i| labels[i] == c).collect();
            let mean = h.select_columns(&idx).column_mean();
            assert!((m.row(r).transpose() - mean).norm() < 1e-12);
        }
    }
}
