//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails; every criterion runs regardless.

use std::time::{Duration, Instant};

use loranpac::baselines::{
    minnorm_offline, normal_equation_residual, ridge_fit, ridge_weights, stratified_split, truncated_offline,
    RidgeConfig,
};
use loranpac::harness::{self, AccuracyMatrix, Protocol, RunOptions, Task};
use loranpac::io::{gen_synthetic, FeatureFile, SpectrumSpec, SyntheticData, SyntheticSpec};
use loranpac::lift::RandomEmbedding;
use loranpac::linalg::{self, Matrix};
use loranpac::report::{evaluate_bounds, BoundOptions, Planted};
use loranpac::solver::{Learner, TruncationPolicy};
use loranpac::theory::{eval_factor_drift, eval_projection_bound, projection_error, BoundKind, BoundReport, StreamRecorder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    check: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "recurrence-residual", budget: Some(Duration::from_secs(30)), check: recurrence_residual },
        Criterion { name: "offline-online-equivalence", budget: Some(Duration::from_secs(10)), check: offline_online_equivalence },
        Criterion { name: "eigen-drift", budget: None, check: eigen_drift },
        Criterion { name: "training-mse-bound", budget: Some(Duration::from_secs(60)), check: training_mse_bound },
        Criterion { name: "test-mse-bound", budget: None, check: test_mse_bound },
        Criterion { name: "gaussian-noise-bounds", budget: None, check: gaussian_noise_bounds },
        Criterion { name: "projection-error-bound", budget: None, check: projection_error_bound },
        Criterion { name: "offline-online-distance", budget: None, check: offline_online_distance },
        Criterion { name: "instability", budget: Some(Duration::from_secs(60)), check: instability },
        Criterion { name: "kernel-oracles", budget: None, check: kernel_oracles },
        Criterion { name: "zeta-stability", budget: None, check: zeta_stability },
        Criterion { name: "ridge-baseline", budget: None, check: ridge_baseline },
        Criterion { name: "protocol-metrics", budget: None, check: protocol_metrics },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let suite = Instant::now();
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = match (result, c.budget) {
            (Ok(_), Some(b)) if took > b => Err(format!("took {:.1}s, budget {}s", took.as_secs_f64(), b.as_secs())),
            (r, _) => r,
        };
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:<28} {:>7.2}s  {detail}", c.name, took.as_secs_f64());
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        ran - failed,
        suite.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|x| x.to_string())
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Column blocks of `h` with the given sizes.
fn split_columns(h: &Matrix, sizes: &[usize]) -> Vec<Matrix> {
    let mut at = 0;
    sizes
        .iter()
        .map(|&n| {
            let b = h.columns(at, n).into_owned();
            at += n;
            b
        })
        .collect()
}

fn random_sizes(total: usize, tasks: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..tasks - 1).map(|_| rng.gen_range(1..total)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    while cuts.len() < tasks - 1 {
        let c = rng.gen_range(1..total);
        if !cuts.contains(&c) {
            cuts.push(c);
            cuts.sort_unstable();
        }
    }
    let mut sizes = Vec::with_capacity(tasks);
    let mut prev = 0;
    for c in cuts.into_iter().chain([total]) {
        sizes.push(c - prev);
        prev = c;
    }
    sizes
}

fn policy(zeta: f64) -> TruncationPolicy {
    if zeta == 0.0 {
        TruncationPolicy::full_rank()
    } else {
        TruncationPolicy::new(zeta, 10_000).expect("valid policy")
    }
}

// ---------------------------------------------------------------------------
// Random ReLU-feature streams shared by several criteria.

struct ReluStream {
    dim: usize,
    zeta: f64,
    blocks: Vec<(Matrix, Vec<u32>)>,
}

fn relu_streams() -> Vec<ReluStream> {
    let zetas = [0.0, 0.1, 0.25, 0.5];
    (0..20)
        .map(|i| {
            let mut rng = ChaCha20Rng::seed_from_u64(1000 + i as u64);
            let dim = if i % 2 == 0 { 200 } else { 1000 };
            let tasks = 3 + i % 6;
            let d = 24;
            let emb = RandomEmbedding::new(d, dim, i as u64).unwrap();
            let blocks = (0..tasks)
                .map(|t| {
                    let m = rng.gen_range(8..=40);
                    let labels: Vec<u32> = (0..m).map(|j| (2 * t + j % 2) as u32).collect();
                    let mut x = gaussian(d, m, &mut rng);
                    for (j, &l) in labels.iter().enumerate() {
                        x[(l as usize % d, j)] += 4.0;
                    }
                    (emb.lift(&x).unwrap(), labels)
                })
                .collect();
            ReluStream { dim, zeta: zetas[i % 4], blocks }
        })
        .collect()
}

fn record(s: &ReluStream) -> Result<StreamRecorder, String> {
    let mut rec = e(StreamRecorder::new(s.dim, policy(s.zeta)))?;
    for (h, l) in &s.blocks {
        e(rec.observe_labels(h, l))?;
    }
    Ok(rec)
}

fn recurrence_residual() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, s) in relu_streams().iter().enumerate() {
        let rec = record(s)?;
        for t in 1..=rec.tasks() {
            let r = e(rec.lemma1_residual(t))?;
            worst = worst.max(r);
            ensure(r <= 1e-6, || format!("stream {i} task {t}: residual {r:e} > 1e-6"))?;
        }
    }
    Ok(format!("20 streams, max residual {worst:.2e} (tol 1e-6)"))
}

fn eigen_drift() -> Outcome {
    let (mut checked_u, mut na_u, mut sigma_n) = (0, 0, 0);
    let mut worst_ratio: f64 = 0.0;
    for (i, s) in relu_streams().iter().enumerate() {
        let rec = record(s)?;
        for t in 1..=rec.tasks() {
            let terms = e(rec.ledger().terms(t))?;
            let [sig, u] = e(eval_factor_drift(&terms, &e(rec.h_upto(t))?, e(rec.state_at(t))?))?;
            ensure(sig.is_checked() && sig.satisfied, || format!("stream {i} task {t}: {sig:?}"))?;
            ensure(u.satisfied, || format!("stream {i} task {t}: {u:?}"))?;
            sigma_n += 1;
            if terms.a_prev > 0.0 {
                worst_ratio = worst_ratio.max(sig.actual_value / terms.a_prev);
            }
            if u.is_checked() {
                checked_u += 1;
            } else {
                na_u += 1;
            }
        }
    }
    Ok(format!(
        "{sigma_n} eigenvalue checks (max drift/a = {worst_ratio:.3}); subspace: {checked_u} checked, {na_u} not applicable, 0 violated"
    ))
}

fn projection_error_bound() -> Outcome {
    let mut n = 0;
    let mut eq_cases = 0;
    let mut worst_eq: f64 = 0.0;
    for (i, s) in relu_streams().iter().enumerate() {
        let rec = record(s)?;
        for t in 1..=rec.tasks() {
            let terms = e(rec.ledger().terms(t))?;
            let h = e(rec.h_upto(t))?;
            let state = e(rec.state_at(t))?;
            let r = e(eval_projection_bound(&terms, &h, state, rec.cap()))?;
            ensure(!r.is_violation(), || format!("stream {i} task {t}: {r:?}"))?;
            n += 1;
            if t == 1 && state.rank() < h.ncols() {
                let lhs = projection_error(&h, state);
                let want = (h.ncols() - state.rank()) as f64;
                let rel = (lhs - want).abs() / want;
                worst_eq = worst_eq.max(rel);
                eq_cases += 1;
                ensure(rel <= 1e-6, || format!("stream {i}: first-task LHS {lhs} vs M-k = {want}"))?;
            }
        }
    }
    ensure(eq_cases > 0, || "no truncated first task among the streams".into())?;
    Ok(format!(
        "{n} checks, 0 violations; first-task equality on {eq_cases} truncated streams, max rel err {worst_eq:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// Planted linear model.

struct PlantedCase {
    data: SyntheticData,
    w_star: Matrix,
    nu: f64,
    zeta: f64,
    r_max: usize,
    sizes: Vec<usize>,
}

fn planted_case(seed: u64, dim: usize, train: usize, test: usize, spectrum: SpectrumSpec, nu: f64, zeta: f64, tasks: usize) -> PlantedCase {
    let spec = SyntheticSpec::PlantedLinear {
        dim,
        classes: 4,
        train_samples: train,
        test_samples: test,
        spectrum,
        nu,
        w_scale: 1.0,
        seed,
    };
    let data = gen_synthetic(&spec).expect("planted data");
    let w_star = data.sidecar.as_ref().unwrap().w_star_matrix().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xabc);
    let sizes = random_sizes(train, tasks, &mut rng);
    PlantedCase { data, w_star, nu, zeta, r_max: 10_000, sizes }
}

impl PlantedCase {
    fn targets(&self) -> &FeatureFile {
        self.data.train_targets.as_ref().unwrap()
    }

    fn recorder_with(&self, y: &Matrix) -> Result<StreamRecorder, String> {
        let pol = if self.zeta == 0.0 {
            TruncationPolicy::full_rank()
        } else {
            e(TruncationPolicy::new(self.zeta, self.r_max))?
        };
        let mut rec = e(StreamRecorder::new(self.data.train.dim(), pol))?;
        let hs = split_columns(&self.data.train.features, &self.sizes);
        let ys = split_columns(y, &self.sizes);
        for (h, y) in hs.iter().zip(&ys) {
            e(rec.observe_targets(h, y))?;
        }
        Ok(rec)
    }

    fn recorder(&self) -> Result<StreamRecorder, String> {
        self.recorder_with(&self.targets().features)
    }

    fn bounds(&self, rec: &StreamRecorder, kinds: &[BoundKind], draws: usize) -> Result<Vec<BoundReport>, String> {
        let test_targets = self.data.test_targets.as_ref().unwrap();
        let planted = Planted {
            w_star: &self.w_star,
            pool: &self.data.test.features,
            pool_targets: &test_targets.features,
            nu: self.nu,
        };
        let opts = BoundOptions { noise_draws: draws, seed: 7, ..BoundOptions::default() };
        e(evaluate_bounds(rec, kinds, Some(&planted), &opts))
    }
}

fn geometric(count: usize, max: f64, min: f64) -> SpectrumSpec {
    SpectrumSpec::Geometric { count, max, min }
}

fn offline_online_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..10u64 {
        let dim = 40 + 8 * i as usize;
        let c = planted_case(i, dim, 60, 10, geometric(30, 10.0, 1.0), 0.05, 0.0, 3 + i as usize % 4);
        let mut learner = e(Learner::new(dim, TruncationPolicy::full_rank()))?;
        let hs = split_columns(&c.data.train.features, &c.sizes);
        let ys = split_columns(&c.targets().features, &c.sizes);
        for (h, y) in hs.iter().zip(&ys) {
            e(learner.observe_targets(h, y))?;
        }
        let online = e(learner.classifier())?.into_matrix();
        let offline = e(minnorm_offline(&c.data.train.features, &c.targets().features))?.into_matrix();
        let rel = linalg::relative_frobenius(&online, &offline);
        worst = worst.max(rel);
        ensure(rel <= 1e-6, || format!("stream {i}: relative distance {rel:e}"))?;
    }
    Ok(format!("10 streams, max relative distance {worst:.2e} (tol 1e-6)"))
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        let diag: f64 = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum();
        if off <= 1e-32 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Squared singular values of `b` (descending), via Jacobi on the smaller Gram matrix.
fn squared_singular_values(b: &Matrix) -> Vec<f64> {
    let g = if b.nrows() <= b.ncols() { b * b.transpose() } else { b.transpose() * b };
    jacobi_eigenvalues(&g).into_iter().map(|x| x.max(0.0)).collect()
}

/// Independent right-hand side of the training bound at every task, from
/// batch spectra of the matrices each truncation acts on, paired with the
/// size of a rounding-level change in it.
fn training_rhs_oracle(rec: &StreamRecorder, w_star: &Matrix, noise: &Matrix, sizes: &[usize]) -> Vec<(f64, f64)> {
    let mut a = vec![0.0];
    let mut worst_truncated: f64 = 0.0;
    let mut out = Vec::new();
    let mut samples = 0;
    let mut prev = (0usize, 0usize);
    let mut at = 0;
    for t in 1..=sizes.len() {
        let h_t = rec.h_upto(t).unwrap().columns(at, sizes[t - 1]).into_owned();
        at += sizes[t - 1];
        let b = if t == 1 {
            h_t
        } else {
            let us = rec.state_at(t - 1).unwrap().scaled_factor();
            linalg::hcat(&us, &h_t).unwrap()
        };
        let mu = squared_singular_values(&b);
        let k = rec.state_at(t).unwrap().rank();
        let mu_trunc = mu.get(k).copied().unwrap_or(0.0);
        let mu_kept = mu[k - 1];
        let gamma_inv = if t == 1 || worst_truncated == 0.0 { 0.0 } else { worst_truncated / mu_kept };
        worst_truncated = worst_truncated.max(mu_trunc);
        let a_prev = *a.last().unwrap();
        a.push(a_prev + mu_trunc);
        samples += sizes[t - 1];
        let m = samples as f64;
        let tm1 = (t - 1) as f64;
        let pen = (prev.0 - prev.1).min((t - 1) * k) as f64;
        prev = (samples, k);

        let cols: usize = sizes[..t].iter().sum();
        let e_t = noise.columns(0, cols).into_owned();
        let e2 = squared_singular_values(&e_t)[0];
        let wf2 = w_star.norm_squared();
        let fit = a[t] / m + a_prev * tm1 * gamma_inv / m + a_prev * tm1 * tm1 * gamma_inv * gamma_inv / m;
        let resid = (m - k as f64) / m + tm1 * pen * gamma_inv * gamma_inv / m;
        let mu_max = mu[0].max(worst_truncated);
        let rounding = 1e-10 * (4.0 * wf2 * (t * t * t) as f64 * mu_max / m + 2.0 * e2);
        out.push((4.0 * wf2 * fit + 2.0 * e2 * resid, rounding));
    }
    out
}

fn training_mse_bound() -> Outcome {
    let nus = [0.0, 0.01, 0.1];
    let zetas = [0.1, 0.25, 0.5];
    let mut n = 0;
    let mut min_slack = f64::INFINITY;
    let mut worst_oracle: f64 = 0.0;
    for i in 0..30u64 {
        let nu = nus[i as usize % 3];
        let zeta = zetas[(i as usize / 3) % 3];
        let dim = 50 + 5 * (i as usize % 7);
        let count = 40;
        let c = planted_case(100 + i, dim, 90, 10, geometric(count, 20.0, 0.05), nu, zeta, 2 + i as usize % 5);
        let rec = c.recorder()?;
        let reports = c.bounds(&rec, &[BoundKind::Thm1], 1)?;
        let noise = &c.targets().features - &c.w_star * &c.data.train.features;
        let oracle = training_rhs_oracle(&rec, &c.w_star, &noise, &c.sizes);
        for (r, (o, rounding)) in reports.iter().zip(&oracle) {
            ensure(!r.is_violation(), || format!("config {i} (nu {nu}, zeta {zeta}) task {}: {r:?}", r.task))?;
            let diff = (r.bound_value - o).abs();
            worst_oracle = worst_oracle.max(diff / (o.abs() + rounding));
            ensure(diff <= 1e-6 * o.abs() + rounding, || {
                format!("config {i} task {}: bound {} vs oracle {o}", r.task, r.bound_value)
            })?;
            ensure(r.actual_value <= o * (1.0 + 1e-9) + r.abs_tol, || {
                format!("config {i} task {}: actual {} above oracle bound {o}", r.task, r.actual_value)
            })?;
            min_slack = min_slack.min(r.slack);
            n += 1;
        }
    }
    Ok(format!(
        "30 configs, {n} checks, 0 violations; bound vs oracle max scaled diff {worst_oracle:.1e}, min slack {min_slack:.2e}"
    ))
}

fn test_mse_bound() -> Outcome {
    let mut n = 0;
    let mut min_slack = f64::INFINITY;
    for i in 0..10u64 {
        let nu = [0.01, 0.1][i as usize % 2];
        let zeta = [0.1, 0.25, 0.5][i as usize % 3];
        let c = planted_case(200 + i, 60, 100, 2500, geometric(40, 10.0, 0.1), nu, zeta, 2 + i as usize % 4);
        let rec = c.recorder()?;
        for r in c.bounds(&rec, &[BoundKind::Thm2], 1)? {
            ensure(!r.is_violation(), || format!("config {i} task {}: {r:?}", r.task))?;
            ensure(r.standard_error.is_some(), || "missing standard error".into())?;
            min_slack = min_slack.min(r.slack);
            n += 1;
        }
    }
    Ok(format!("10 configs, 2500-sample pools, {n} checks within bound + 3 SE, min slack {min_slack:.2e}"))
}

fn gaussian_noise_bounds() -> Outcome {
    let mut n = 0;
    let mut within_se = 0;
    let mut distinct = 0;
    for i in 0..10u64 {
        let nu = [0.01, 0.1][i as usize % 2];
        let zeta = [0.1, 0.25, 0.5][i as usize % 3];
        let c = planted_case(300 + i, 60, 100, 2000, geometric(40, 10.0, 0.1), nu, zeta, 2 + i as usize % 4);
        let rec = c.recorder()?;
        let reports = c.bounds(&rec, &[BoundKind::Thm3, BoundKind::Thm4, BoundKind::Thm5], 20)?;
        for r in &reports {
            ensure(!r.is_violation(), || format!("config {i} task {}: {r:?}", r.task))?;
            n += 1;
            if r.actual_value > r.bound_value {
                within_se += 1;
            }
        }
        for pair in reports.chunks(3) {
            if (pair[0].actual_value - pair[1].actual_value).abs() > 1e-12 {
                distinct += 1;
            }
        }
    }
    Ok(format!("10 configs x 20 noise draws, {n} checks, 0 violations ({within_se} above the bound by less than 3 SE); residual and fitted sides differ in {distinct} cases"))
}

fn offline_online_distance() -> Outcome {
    let mut configs = 0;
    let mut checked = 0;
    let mut max_ratio: f64 = 0.0;
    for i in 0..10u64 {
        let big = 8 + i as usize % 5;
        let spectrum = SpectrumSpec::Tail {
            count: big,
            max: 30.0,
            min: 20.0,
            tail_count: 20,
            tail_value: 1e-3,
        };
        let mut c = planted_case(400 + i, 50, 80, 10, spectrum, 0.0, 0.1, 2 + i as usize % 4);
        c.r_max = big;
        let clean = &c.w_star * &c.data.train.features;
        let rec = c.recorder_with(&clean)?;
        let reports = c.bounds(&rec, &[BoundKind::Thm7], 1)?;
        for r in &reports {
            ensure(r.is_checked(), || format!("config {i} task {}: hypothesis not met ({r:?})", r.task))?;
            ensure(r.satisfied, || format!("config {i} task {}: {r:?}", r.task))?;
            if r.bound_value > 0.0 {
                max_ratio = max_ratio.max(r.actual_value / r.bound_value);
            }
            checked += 1;
        }
        let w_off = e(truncated_offline(&c.data.train.features, &clean, big))?.into_matrix();
        ensure(w_off.ncols() == c.data.train.dim(), || "offline shape".into())?;
        configs += 1;
    }
    Ok(format!("{configs} configs, {checked} checks with hypothesis met, 0 violations, max actual/bound {max_ratio:.3}"))
}

// ---------------------------------------------------------------------------
// Classification streams.

/// Lifted Gaussian-mixture stream; with `planted` the smallest singular
/// values of the training matrix are replaced by `1e-8`.
fn mixture_tasks(separation: f64, planted: Option<usize>, q2: usize) -> Vec<Task> {
    let spec = SyntheticSpec::GaussianMixture {
        dim: 64,
        classes: 10,
        train_per_class: 60,
        test_per_class: 50,
        separation,
        sigma: 1.0,
        seed: 5,
    };
    let d = gen_synthetic(&spec).unwrap();
    let emb = RandomEmbedding::new(64, 1500, 1).unwrap();
    let mut train = FeatureFile::new(emb.lift(&d.train.features).unwrap(), d.train.labels.clone()).unwrap();
    let test = FeatureFile::new(emb.lift(&d.test.features).unwrap(), d.test.labels.clone()).unwrap();
    if let Some(q) = planted {
        let f = linalg::svd(&train.features, true).unwrap();
        let v = f.v.clone().unwrap();
        let n = f.s.len();
        let mut s = f.s.clone();
        for i in n - q..n {
            s[i] = 1e-8;
        }
        let mut us = f.u.clone();
        linalg::scale_columns(&mut us, s.as_slice());
        train.features = us * v.transpose();
    }
    let p = Protocol::new(0, q2, 3).unwrap();
    harness::build_stream(&train, &test, &p).unwrap()
}

fn run_zeta(tasks: &[Task], zeta: f64) -> Result<(f64, f64), String> {
    let mut l = e(Learner::new(tasks[0].train.dim(), policy(zeta)))?;
    let o = e(harness::run(tasks, &mut l, RunOptions { train_mse: true }))?;
    let acc = e(o.final_accuracy())?;
    Ok((acc, o.final_train_mse().unwrap_or(f64::INFINITY)))
}

fn instability() -> Outcome {
    let tasks = mixture_tasks(4.0, Some(100), 2);
    let (acc0, mse0) = run_zeta(&tasks, 0.0)?;
    let (acc25, mse25) = run_zeta(&tasks, 0.25)?;
    let detail = format!(
        "zeta=0: acc {acc0:.3}, train MSE {mse0:.3e}; zeta=0.25: acc {acc25:.3}, train MSE {mse25:.3e}"
    );
    let acc_ok = acc0 <= 0.5 * acc25;
    let mse_ok = mse0 >= 10.0 * mse25;
    match (acc_ok, mse_ok) {
        (true, true) => Ok(detail),
        (true, false) => Err(format!("accuracy collapses but train MSE ratio is {:.2e} (< 10); {detail}", mse0 / mse25)),
        (false, true) => Err(format!("train MSE grows but accuracy does not halve; {detail}")),
        (false, false) => Err(format!("neither effect; {detail}")),
    }
}

fn zeta_stability() -> Outcome {
    let clean = mixture_tasks(12.0, None, 2);
    let mut accs = Vec::new();
    for z in [0.05, 0.1, 0.25, 0.5] {
        accs.push(run_zeta(&clean, z)?.0);
    }
    let hi = accs.iter().copied().fold(f64::MIN, f64::max);
    let lo = accs.iter().copied().fold(f64::MAX, f64::min);
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let ill = mixture_tasks(12.0, Some(100), 2);
    let (acc0, _) = run_zeta(&ill, 0.0)?;
    let detail = format!(
        "accuracies {:?}, spread {:.1} pts; zeta=0 on ill-conditioned variant {:.3} (drop {:.1} pts)",
        accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
        100.0 * (hi - lo),
        acc0,
        100.0 * (mean - acc0)
    );
    ensure(hi - lo <= 0.02 + 1e-12, || format!("spread too wide; {detail}"))?;
    ensure(mean - acc0 >= 0.30, || format!("no collapse; {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Dense kernels against test-side oracles.

fn kernel_oracles() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let (mut qr_err, mut svd_err, mut ey_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for i in 0..100 {
        let m = rng.gen_range(5..40);
        let n = rng.gen_range(1..=m);
        let mut a = gaussian(m, n, &mut rng);
        if i % 5 == 0 && n > 2 {
            // rank-deficient: duplicate a column
            let c = a.column(0).into_owned();
            a.set_column(n - 1, &c);
        }
        let (q, r) = e(linalg::qr_thin(&a))?;
        let orth = (q.transpose() * &q - Matrix::identity(q.ncols(), q.ncols())).norm();
        let rec = (&q * &r - &a).norm() / a.norm();
        let lower: f64 = (0..r.nrows()).flat_map(|i| (0..i.min(r.ncols())).map(move |j| (i, j))).map(|ij| r[ij].abs()).sum();
        qr_err = qr_err.max(orth).max(rec).max(lower);
        ensure(orth <= 1e-8 && rec <= 1e-8 && lower == 0.0, || format!("qr instance {i}: orth {orth:e} rec {rec:e}"))?;
    }
    for i in 0..100 {
        let m = rng.gen_range(2..30);
        let n = rng.gen_range(2..30);
        let a = gaussian(m, n, &mut rng);
        let f = e(linalg::svd(&a, true))?;
        let oracle = squared_singular_values(&a);
        let top = oracle[0];
        for (j, s) in f.s.iter().enumerate() {
            let rel = (s * s - oracle[j]).abs() / top;
            svd_err = svd_err.max(rel);
            ensure(rel <= 1e-8, || format!("svd instance {i} value {j}: {} vs {}", s * s, oracle[j]))?;
        }
        let rec = (e(f.reconstruct())? - &a).norm() / a.norm();
        let orth = (f.u.transpose() * &f.u - Matrix::identity(f.u.ncols(), f.u.ncols())).norm();
        svd_err = svd_err.max(rec).max(orth);
        ensure(rec <= 1e-8 && orth <= 1e-8, || format!("svd instance {i}: rec {rec:e} orth {orth:e}"))?;
        ensure(f.s.as_slice().windows(2).all(|w| w[0] >= w[1]), || format!("svd instance {i}: unsorted"))?;
    }
    for i in 0..100 {
        let m = rng.gen_range(4..30);
        let n = rng.gen_range(4..30);
        let a = gaussian(m, n, &mut rng);
        let p = m.min(n);
        let r = rng.gen_range(1..=p);
        let f = e(linalg::truncated_svd(&a, r))?;
        let resid = (e(f.reconstruct())? - &a).norm();
        let tail: f64 = squared_singular_values(&a)[r..p].iter().sum::<f64>().sqrt();
        let rel = (resid - tail).abs() / a.norm();
        ey_err = ey_err.max(rel);
        ensure(rel <= 1e-8, || format!("truncation instance {i} (r={r}): residual {resid} vs {tail}"))?;
        // no random rank-r competitor does better
        let (q, _) = e(linalg::qr_thin(&gaussian(m, r, &mut rng)))?;
        let proj = &q * (q.transpose() * &a);
        ensure((&a - proj).norm() >= resid - 1e-10 * a.norm(), || format!("truncation instance {i}: beaten by a projection"))?;
    }
    Ok(format!("300 instances; max errors: qr {qr_err:.1e}, svd {svd_err:.1e}, truncation {ey_err:.1e} (tol 1e-8)"))
}

// ---------------------------------------------------------------------------

fn ridge_baseline() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let mut worst_resid: f64 = 0.0;
    for _ in 0..20 {
        let (dim, m, c) = (rng.gen_range(10..60), rng.gen_range(10..80), 5);
        let h = gaussian(dim, m, &mut rng);
        let y = gaussian(c, m, &mut rng);
        for lambda in [1e-3, 1.0, 100.0] {
            let w = e(ridge_weights(&h, &y, lambda))?;
            let r = normal_equation_residual(&w, &h, &y, lambda);
            worst_resid = worst_resid.max(r);
            ensure(r <= 1e-10, || format!("normal-equation residual {r:e} at lambda {lambda}"))?;
        }
    }
    let mut worst_limit: f64 = 0.0;
    for _ in 0..10 {
        let (dim, m) = (rng.gen_range(5..25), rng.gen_range(60..120));
        let h = gaussian(dim, m, &mut rng);
        let y = gaussian(4, m, &mut rng);
        let w = e(ridge_weights(&h, &y, 1e-10))?;
        let w0 = e(minnorm_offline(&h, &y))?.into_matrix();
        let rel = linalg::relative_frobenius(&w, &w0);
        worst_limit = worst_limit.max(rel);
        ensure(rel <= 1e-4, || format!("small-lambda ridge vs min-norm: {rel:e}"))?;
    }
    let spec = SyntheticSpec::GaussianMixture {
        dim: 30,
        classes: 6,
        train_per_class: 40,
        test_per_class: 1,
        separation: 1.5,
        sigma: 1.0,
        seed: 2,
    };
    let d = gen_synthetic(&spec).unwrap();
    let h = RandomEmbedding::new(30, 120, 4).unwrap().lift(&d.train.features).unwrap();
    let cfg = RidgeConfig { holdout_fraction: 0.25, split_seed: 5, ..RidgeConfig::default() };
    let fit = e(ridge_fit(&h, &d.train.labels, &cfg))?;
    let (tr, ho) = stratified_split(&d.train.labels, cfg.holdout_fraction, cfg.split_seed);
    let mut ids = loranpac::solver::ClassMap::new();
    let y = loranpac::baselines::one_hot(&d.train.labels, &mut ids);
    let (h_tr, y_tr, h_ho) = (h.select_columns(&tr), y.select_columns(&tr), h.select_columns(&ho));
    let l_ho: Vec<u32> = ho.iter().map(|&i| d.train.labels[i]).collect();
    let mut best = f64::MIN;
    let mut chosen = None;
    for &lambda in &cfg.lambda_grid {
        let w = e(ridge_weights(&h_tr, &y_tr, lambda))?;
        let scores = w * &h_ho;
        let hits = (0..ho.len())
            .filter(|&j| {
                let col = scores.column(j);
                let arg = (0..col.len()).fold(0, |b, r| if col[r] > col[b] { r } else { b });
                ids.ids()[arg] == l_ho[j]
            })
            .count();
        let acc = hits as f64 / ho.len() as f64;
        if acc > best {
            best = acc;
            chosen = Some(lambda);
        }
    }
    let picked = fit.holdout_scores.iter().find(|s| s.0 == fit.lambda).map(|s| s.1).unwrap_or(f64::NAN);
    ensure(picked == best, || format!("selected lambda {} scores {picked}, best is {best}", fit.lambda))?;
    ensure(chosen == Some(fit.lambda), || format!("selected {} but first best is {chosen:?}", fit.lambda))?;
    Ok(format!(
        "residual max {worst_resid:.1e}; lambda->0 gap {worst_limit:.1e}; holdout pick lambda={:e} at accuracy {best:.3}",
        fit.lambda
    ))
}

fn protocol_metrics() -> Outcome {
    let p = Protocol::new(16, 20, 0).unwrap();
    let sizes = e(p.task_sizes(196))?;
    let mut want = vec![16];
    want.extend([20; 9]);
    ensure(sizes == want, || format!("196 classes B16-Inc20 gave {sizes:?}"))?;
    let labels: Vec<u32> = (0..196 * 2).map(|i| (i % 196) as u32).collect();
    let groups = e(harness::task_classes(&labels, &p))?;
    let mut all: Vec<u32> = groups.iter().flatten().copied().collect();
    all.sort_unstable();
    ensure(groups.len() == 10 && all == (0..196).collect::<Vec<u32>>(), || "classes are not partitioned".into())?;
    ensure(e(Protocol::new(0, 1, 0).unwrap().task_sizes(100))?.len() == 100, || "Inc-1 over 100 classes".into())?;

    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for _ in 0..50 {
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3 - i).map(|_| rng.gen_range(0..=64) as f64 / 64.0).collect())
            .collect();
        let m = e(AccuracyMatrix::from_upper(&rows))?;
        let cells = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
        let get = |i: usize, t: usize| m.get(i, t).unwrap();
        let brute_total = cells.iter().map(|&(i, t)| get(i, t)).sum::<f64>() / 6.0;
        let brute_final = (get(0, 2) + get(1, 2) + get(2, 2)) / 3.0;
        ensure(e(m.total_accuracy())? == brute_total, || format!("total accuracy of {rows:?}"))?;
        ensure(e(m.final_accuracy())? == brute_final, || format!("final accuracy of {rows:?}"))?;
    }
    Ok("196/16/20 -> 10 tasks (16, 20x9); 50 random T=3 matrices match enumeration exactly".into())
}
