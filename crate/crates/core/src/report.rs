//! Replays a finished stream through a [`StreamRecorder`] and evaluates bounds
//! after every task.

use serde::{Deserialize, Serialize};

use crate::baselines::truncated_offline;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::theory::{
    eval_factor_drift, eval_gaussian_bounds, eval_offline_online_distance, eval_projection_bound,
    eval_test_bound, eval_training_bound, BoundKind, BoundReport, GaussianBoundInputs, StreamRecorder,
    TestBoundInputs,
};

/// Default relative tolerance of the recurrence residual.
pub const LEMMA1_TOL: f64 = 1e-6;

/// Ground truth of a planted linear model, needed by the bounds on `W*`.
#[derive(Debug, Clone)]
pub struct Planted<'a> {
    pub w_star: &'a Matrix,
    /// Held-out features.
    pub pool: &'a Matrix,
    /// Held-out targets, one column per pool sample.
    pub pool_targets: &'a Matrix,
    pub nu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundOptions {
    pub lemma1_tol: f64,
    pub noise_draws: usize,
    pub seed: u64,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            lemma1_tol: LEMMA1_TOL,
            noise_draws: 20,
            seed: 0,
        }
    }
}

impl BoundKind {
    pub fn needs_planted(self) -> bool {
        !matches!(self, BoundKind::Lemma1 | BoundKind::Prop1 | BoundKind::Thm6Sigma | BoundKind::Thm6U)
    }
}

/// Every report for `kinds` after every task of the recorded stream.
///
/// The recorder must have been fed dense targets for the bounds on `W*`.
pub fn evaluate_bounds(
    rec: &StreamRecorder,
    kinds: &[BoundKind],
    planted: Option<&Planted<'_>>,
    opts: &BoundOptions,
) -> Result<Vec<BoundReport>> {
    if let Some(k) = kinds.iter().find(|k| k.needs_planted()) {
        if planted.is_none() {
            return Err(Error::Config(format!("bound `{k}` needs a planted-linear dataset")));
        }
    }
    let mut out = Vec::new();
    for t in 1..=rec.tasks() {
        let terms = rec.ledger().terms(t)?;
        let h = rec.h_upto(t)?;
        let state = rec.state_at(t)?;
        let mut drift: Option<[BoundReport; 2]> = None;
        let mut gauss: Option<[BoundReport; 3]> = None;
        for &kind in kinds {
            let report = match kind {
                BoundKind::Lemma1 => rec.lemma1_report(t, opts.lemma1_tol)?,
                BoundKind::Prop1 => eval_projection_bound(&terms, &h, state, rec.cap())?,
                BoundKind::Thm6Sigma | BoundKind::Thm6U => {
                    if drift.is_none() {
                        drift = Some(eval_factor_drift(&terms, &h, state)?);
                    }
                    let [s, u] = drift.clone().unwrap();
                    if kind == BoundKind::Thm6Sigma {
                        s
                    } else {
                        u
                    }
                }
                BoundKind::Thm1 => {
                    let p = planted.unwrap();
                    let y = rec.y_upto(t)?;
                    let noise = &y - p.w_star * &h;
                    let w = rec.classifier_for(t, &y)?;
                    eval_training_bound(&terms, p.w_star, &noise, &h, &y, &w)?
                }
                BoundKind::Thm2 => {
                    let p = planted.unwrap();
                    let y = rec.y_upto(t)?;
                    let noise = &y - p.w_star * &h;
                    let pool_noise = p.pool_targets - p.w_star * p.pool;
                    let w = rec.classifier_for(t, &y)?;
                    eval_test_bound(&TestBoundInputs {
                        terms,
                        w_star: p.w_star,
                        train_noise: &noise,
                        h: &h,
                        pool: p.pool,
                        pool_noise: &pool_noise,
                        noise_second_moment: p.w_star.nrows() as f64 * p.nu * p.nu,
                        w: &w,
                    })?
                }
                BoundKind::Thm3 | BoundKind::Thm4 | BoundKind::Thm5 => {
                    if gauss.is_none() {
                        let p = planted.unwrap();
                        let op = rec.fit_operator(t)?;
                        gauss = Some(eval_gaussian_bounds(&GaussianBoundInputs {
                            terms,
                            w_star: p.w_star,
                            h: &h,
                            fit_operator: &op,
                            pool: p.pool,
                            nu: p.nu,
                            draws: opts.noise_draws,
                            seed: opts.seed.wrapping_add(t as u64),
                        })?);
                    }
                    let g = gauss.clone().unwrap();
                    match kind {
                        BoundKind::Thm3 => g[0].clone(),
                        BoundKind::Thm4 => g[1].clone(),
                        _ => g[2].clone(),
                    }
                }
                BoundKind::Thm7 => {
                    // noiseless targets; offline means the batch rank-k solution
                    let p = planted.unwrap();
                    let clean = p.w_star * &h;
                    let w_off = truncated_offline(&h, &clean, state.rank())?.into_matrix();
                    let w_on = rec.classifier_for(t, &clean)?;
                    let top = linalg::spectral_norm(&h)?;
                    eval_offline_online_distance(&terms, &w_off, &w_on, p.w_star, top * top)?
                }
            };
            out.push(report);
        }
    }
    Ok(out)
}

/// Parses `thm6` as both factor-drift checks and `all` as every bound.
pub fn parse_bound_list(s: &str) -> Result<Vec<BoundKind>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.to_ascii_lowercase().as_str() {
            "thm6" => out.extend([BoundKind::Thm6Sigma, BoundKind::Thm6U]),
            "all" => out.extend(BoundKind::ALL),
            _ => out.push(part.parse().map_err(|e: Error| Error::Config(e.to_string()))?),
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no bound selected".into()));
    }
    let mut seen = Vec::new();
    out.retain(|k| {
        let fresh = !seen.contains(k);
        seen.push(*k);
        fresh
    });
    Ok(out)
}

/// Reports as JSON lines.
pub fn reports_jsonl(reports: &[BoundReport]) -> Result<String> {
    let mut s = String::new();
    for r in reports {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}
