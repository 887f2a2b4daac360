use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use loranpac::baselines::RidgeConfig;
use loranpac::error::{Error, Result};
use loranpac::harness::{self, Method, Mode, Protocol, RunOptions, RunOutcome, Task};
use loranpac::io::{self, FeatureFile, SyntheticSpec};
use loranpac::itsvd::DEFAULT_MATERIALIZATION_CAP;
use loranpac::lift::RandomEmbedding;
use loranpac::linalg::Matrix;
use loranpac::manifest::{FileRef, LiftRecord, PlantedRecord, RunManifest, MANIFEST_FILE};
use loranpac::report::{self, BoundOptions, Planted, LEMMA1_TOL};
use loranpac::solver::{TruncationPolicy, DEFAULT_RMAX, DEFAULT_ZETA};
use loranpac::theory::{self, StreamRecorder};

#[derive(Parser)]
#[command(name = "loranpac", version, about = "Continual least squares on random ReLU features")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Apply the random ReLU lift to a feature file.
    Lift(LiftArgs),
    /// Generate a synthetic dataset from a JSON spec.
    Gen(GenArgs),
    /// Run one method over an incremental stream.
    Run(RunArgs),
    /// Run several methods over the same stream.
    Compare(CompareArgs),
    /// Dump the Gram spectrum and effective ranks of a feature file.
    Spectrum(SpectrumArgs),
    /// Replay a run directory and evaluate bounds after every task.
    Bounds(BoundsArgs),
}

#[derive(Args)]
struct LiftArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Output dimension E.
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Settings shared by `run` and `compare`; flags override the config file.
#[derive(Args, Default)]
struct StreamArgs {
    /// JSON config file; its keys mirror the long flag names with underscores.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `B<q1>-Inc<q2>` or `DIL`.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    order_seed: Option<u64>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    rmax: Option<usize>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Lift both splits to this dimension before learning.
    #[arg(long)]
    lift_dim: Option<usize>,
    #[arg(long)]
    lift_seed: Option<u64>,
    /// Fixed ridge penalty instead of holdout selection.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Directory written by `gen` for a planted-linear model.
    #[arg(long)]
    planted: Option<PathBuf>,
    /// Record training MSE after every task.
    #[arg(long)]
    train_mse: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    method: Option<String>,
    #[command(flatten)]
    stream: StreamArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated method names.
    #[arg(long)]
    methods: Option<String>,
    #[command(flatten)]
    stream: StreamArgs,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lift_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    lift_seed: u64,
    #[arg(long, default_value_t = DEFAULT_MATERIALIZATION_CAP)]
    cap: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated: lemma1, thm1..thm7, prop1, thm6sigma, thm6u, all.
    #[arg(long, default_value = "lemma1")]
    which: String,
    /// Method to replay when the run directory holds several.
    #[arg(long)]
    method: Option<String>,
    #[arg(long, default_value_t = 20)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = LEMMA1_TOL)]
    lemma1_tol: f64,
    #[arg(long, default_value_t = DEFAULT_MATERIALIZATION_CAP)]
    cap: usize,
    /// Also write the JSON lines to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    method: Option<String>,
    methods: Option<Vec<String>>,
    protocol: Option<String>,
    order_seed: Option<u64>,
    zeta: Option<f64>,
    rmax: Option<usize>,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    lift_dim: Option<usize>,
    lift_seed: Option<u64>,
    lambda: Option<f64>,
    lambda_grid: Option<Vec<f64>>,
    holdout_fraction: Option<f64>,
    split_seed: Option<u64>,
    planted: Option<PathBuf>,
    train_mse: Option<bool>,
}

fn exit_class(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Io(_) | Error::Json(_) => ("config", 2),
        Error::Format { .. } => ("format", 4),
        Error::InvalidInput(_)
        | Error::Numeric(_)
        | Error::IllConditioned { .. }
        | Error::SizeCap { .. }
        | Error::InvalidState(_) => ("numeric", 3),
    }
}

fn report_error(kind: &str, code: u8, message: &str) -> ExitCode {
    let body = json!({ "error": { "kind": kind, "code": code, "message": message } });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return report_error("config", 2, e.to_string().trim_end());
        }
    };
    let result = match cli.cmd {
        Cmd::Lift(a) => cmd_lift(a),
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Spectrum(a) => cmd_spectrum(a),
        Cmd::Bounds(a) => cmd_bounds(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = exit_class(&e);
            report_error(kind, code, &e.to_string())
        }
    }
}

fn guard_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn guard_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "{} is not empty; use a new directory or pass --force",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_lift(a: LiftArgs) -> Result<()> {
    let data = FeatureFile::read(&a.input)?;
    guard_file(&a.out, a.force)?;
    let emb = RandomEmbedding::new(data.dim(), a.dim, a.seed)?;
    let lifted = FeatureFile::new(emb.lift(&data.features)?, data.labels)?;
    lifted.write(&a.out)?;
    println!(
        "{}",
        json!({ "out": a.out, "samples": lifted.len(), "input_dim": emb.input_dim(), "output_dim": emb.output_dim(), "seed": a.seed })
    );
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).map_err(|e| Error::Config(format!("{}: {e}", a.spec.display())))?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.spec.display())))?;
    guard_dir(&a.out, a.force)?;
    let data = io::gen_synthetic(&spec)?;
    let written = data.write_to(&a.out, &spec)?;
    println!("{}", json!({ "written": written, "train": data.train.len(), "test": data.test.len() }));
    Ok(())
}

/// Fully resolved stream settings.
struct Resolved {
    protocol: Protocol,
    policy: TruncationPolicy,
    ridge: RidgeConfig,
    train_path: PathBuf,
    test_path: PathBuf,
    lift: Option<(usize, u64)>,
    planted: Option<PathBuf>,
    track_train_mse: bool,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn resolve(s: &StreamArgs, cfg: &FileConfig) -> Result<Resolved> {
    let protocol_text = s
        .protocol
        .clone()
        .or_else(|| cfg.protocol.clone())
        .ok_or_else(|| Error::Config("--protocol is required".into()))?;
    let order_seed = s.order_seed.or(cfg.order_seed).unwrap_or(0);
    let protocol = protocol_text.parse::<Protocol>()?.with_seed(order_seed);
    let zeta = s.zeta.or(cfg.zeta).unwrap_or(DEFAULT_ZETA);
    let rmax = s.rmax.or(cfg.rmax).unwrap_or(DEFAULT_RMAX);
    let policy = TruncationPolicy::new(zeta, rmax).map_err(|e| Error::Config(e.to_string()))?;
    let mut ridge = RidgeConfig::default();
    if let Some(g) = &cfg.lambda_grid {
        ridge.lambda_grid = g.clone();
    }
    ridge.fixed_lambda = s.lambda.or(cfg.lambda);
    ridge.holdout_fraction = s.holdout_fraction.or(cfg.holdout_fraction).unwrap_or(ridge.holdout_fraction);
    ridge.split_seed = s.split_seed.or(cfg.split_seed).unwrap_or(0);
    ridge.validate().map_err(|e| Error::Config(e.to_string()))?;
    let train_path = s
        .train
        .clone()
        .or_else(|| cfg.train.clone())
        .ok_or_else(|| Error::Config("--train is required".into()))?;
    let test_path = s
        .test
        .clone()
        .or_else(|| cfg.test.clone())
        .ok_or_else(|| Error::Config("--test is required".into()))?;
    let lift = s
        .lift_dim
        .or(cfg.lift_dim)
        .map(|e| (e, s.lift_seed.or(cfg.lift_seed).unwrap_or(0)));
    Ok(Resolved {
        protocol,
        policy,
        ridge,
        train_path,
        test_path,
        lift,
        planted: s.planted.clone().or_else(|| cfg.planted.clone()),
        track_train_mse: s.train_mse || cfg.train_mse.unwrap_or(false),
    })
}

/// Reads both splits, lifting them when asked.
fn load_splits(r: &Resolved) -> Result<(FeatureFile, FeatureFile, Option<LiftRecord>)> {
    let mut train = FeatureFile::read(&r.train_path)?;
    let mut test = FeatureFile::read(&r.test_path)?;
    if train.dim() != test.dim() {
        return Err(Error::Config(format!(
            "train dimension {} differs from test dimension {}",
            train.dim(),
            test.dim()
        )));
    }
    let lift = match r.lift {
        None => None,
        Some((dim, seed)) => {
            let emb = RandomEmbedding::new(train.dim(), dim, seed)?;
            train.features = emb.lift(&train.features)?;
            test.features = emb.lift(&test.features)?;
            Some(LiftRecord::new(emb.config()))
        }
    };
    Ok((train, test, lift))
}

fn planted_record(dir: &Path) -> Result<PlantedRecord> {
    Ok(PlantedRecord {
        sidecar: FileRef::of(dir.join(io::SIDECAR_FILE))?,
        train_targets: FileRef::of(dir.join(io::TRAIN_TARGETS_FILE))?,
        test_targets: FileRef::of(dir.join(io::TEST_TARGETS_FILE))?,
    })
}

fn run_method(method: Method, tasks: &[Task], dim: usize, r: &Resolved) -> Result<RunOutcome> {
    let mut learner = method.build(dim, r.policy, &r.ridge)?;
    harness::run(
        tasks,
        learner.as_mut(),
        RunOptions {
            train_mse: r.track_train_mse,
        },
    )
}

fn metrics_json(o: &RunOutcome, protocol: &Protocol) -> serde_json::Value {
    json!({
        "method": o.method,
        "protocol": protocol.to_string(),
        "tasks": o.accuracy.tasks(),
        "final_accuracy": o.final_accuracy().ok(),
        "total_accuracy": o.total_accuracy().ok(),
        "final_train_mse": o.final_train_mse(),
        "steps": o.steps,
        "failures": o.failures,
    })
}

/// Writes accuracy, metrics and (if any) ledger files; returns their names.
fn write_outcome(dir: &Path, o: &RunOutcome, protocol: &Protocol) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        fs::write(dir.join(name), body)?;
        names.push(name.to_string());
        Ok(())
    };
    put("accuracy.csv", o.accuracy.to_csv())?;
    put("metrics.json", serde_json::to_string_pretty(&metrics_json(o, protocol))?)?;
    if let Some(l) = &o.ledger {
        put("ledger.csv", l.to_csv())?;
    }
    Ok(names)
}

fn build_tasks(train: &FeatureFile, test: &FeatureFile, protocol: &Protocol) -> Result<Vec<Task>> {
    harness::build_stream(train, test, protocol)
}

fn manifest_for(command: &str, methods: &[Method], r: &Resolved, lift: Option<LiftRecord>, outputs: Vec<String>) -> Result<RunManifest> {
    Ok(RunManifest {
        tool: "loranpac".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        methods: methods.iter().map(|m| m.name().to_string()).collect(),
        protocol: r.protocol,
        policy: r.policy,
        ridge: r.ridge.clone(),
        lift,
        train: FileRef::of(&r.train_path)?,
        test: FileRef::of(&r.test_path)?,
        planted: r.planted.as_deref().map(planted_record).transpose()?,
        track_train_mse: r.track_train_mse,
        outputs,
    })
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = read_config(a.stream.config.as_deref())?;
    let r = resolve(&a.stream, &cfg)?;
    let method: Method = a
        .method
        .clone()
        .or_else(|| cfg.method.clone())
        .unwrap_or_else(|| "loranpac".into())
        .parse()?;
    guard_dir(&a.stream.out, a.stream.force)?;
    let (train, test, lift) = load_splits(&r)?;
    let tasks = build_tasks(&train, &test, &r.protocol)?;
    let outcome = run_method(method, &tasks, train.dim(), &r)?;
    let mut outputs = write_outcome(&a.stream.out, &outcome, &r.protocol)?;
    outputs.push(MANIFEST_FILE.into());
    let manifest = manifest_for("run", &[method], &r, lift, outputs)?;
    fs::write(a.stream.out.join(MANIFEST_FILE), manifest.to_json()?)?;
    println!("{}", metrics_summary(&outcome));
    Ok(())
}

fn metrics_summary(o: &RunOutcome) -> serde_json::Value {
    json!({
        "method": o.method,
        "tasks": o.accuracy.tasks(),
        "final_accuracy": o.final_accuracy().ok(),
        "total_accuracy": o.total_accuracy().ok(),
        "final_train_mse": o.final_train_mse(),
        "failures": o.failures.len(),
    })
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let cfg = read_config(a.stream.config.as_deref())?;
    let r = resolve(&a.stream, &cfg)?;
    let names: Vec<String> = match (&a.methods, &cfg.methods) {
        (Some(s), _) => s.split(',').map(|m| m.trim().to_string()).filter(|m| !m.is_empty()).collect(),
        (None, Some(v)) => v.clone(),
        (None, None) => Method::ALL.iter().map(|m| m.name().to_string()).collect(),
    };
    let methods = names.iter().map(|n| n.parse()).collect::<Result<Vec<Method>>>()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods given".into()));
    }
    guard_dir(&a.stream.out, a.stream.force)?;
    let (train, test, lift) = load_splits(&r)?;
    let tasks = build_tasks(&train, &test, &r.protocol)?;
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    let mut csv = String::from("method,final_accuracy,total_accuracy,final_train_mse,failures\n");
    for &m in &methods {
        let o = run_method(m, &tasks, train.dim(), &r)?;
        let sub = a.stream.out.join(m.name());
        fs::create_dir_all(&sub)?;
        for f in write_outcome(&sub, &o, &r.protocol)? {
            outputs.push(format!("{}/{f}", m.name()));
        }
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            m.name(),
            opt(o.final_accuracy().ok()),
            opt(o.total_accuracy().ok()),
            opt(o.final_train_mse()),
            o.failures.len()
        ));
        rows.push(metrics_summary(&o));
    }
    fs::write(a.stream.out.join("compare.csv"), csv)?;
    fs::write(a.stream.out.join("compare.json"), serde_json::to_string_pretty(&rows)?)?;
    outputs.extend(["compare.csv".to_string(), "compare.json".to_string(), MANIFEST_FILE.to_string()]);
    let manifest = manifest_for("compare", &methods, &r, lift, outputs)?;
    fs::write(a.stream.out.join(MANIFEST_FILE), manifest.to_json()?)?;
    println!("{}", serde_json::Value::Array(rows));
    Ok(())
}

fn cmd_spectrum(a: SpectrumArgs) -> Result<()> {
    let data = FeatureFile::read(&a.input)?;
    let h = match a.lift_dim {
        Some(e) => RandomEmbedding::new(data.dim(), e, a.lift_seed)?.lift(&data.features)?,
        None => data.features,
    };
    let n = h.nrows().min(h.ncols());
    if n > a.cap {
        return Err(Error::SizeCap { dim: n, cap: a.cap });
    }
    let rows = theory::spectrum_rows(&theory::gram_spectrum(&h)?);
    let csv = theory::spectrum_csv(&rows);
    match a.out {
        Some(p) => {
            guard_file(&p, a.force)?;
            fs::write(p, csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_bounds(a: BoundsArgs) -> Result<()> {
    let kinds = report::parse_bound_list(&a.which)?;
    let man = RunManifest::read(&a.run)?;
    let method = match &a.method {
        Some(m) => m.parse::<Method>()?,
        None => man
            .methods
            .iter()
            .filter_map(|m| m.parse::<Method>().ok())
            .find(|m| matches!(m, Method::Loranpac | Method::Minnorm))
            .ok_or_else(|| Error::Config("bounds apply to loranpac or minnorm runs only".into()))?,
    };
    if !man.methods.iter().any(|m| m == method.name()) {
        return Err(Error::Config(format!("method {method} is not part of this run")));
    }
    let policy = match method {
        Method::Loranpac => man.policy,
        Method::Minnorm => TruncationPolicy::full_rank(),
        _ => return Err(Error::Config("bounds apply to loranpac or minnorm runs only".into())),
    };
    if let Some(p) = &a.out {
        guard_file(p, a.force)?;
    }
    man.train.verify()?;
    let mut train = FeatureFile::read(&man.train.path)?;
    if let Some(l) = &man.lift {
        let emb = RandomEmbedding::new(l.config.input_dim, l.config.output_dim, l.config.seed)?;
        train.features = emb.lift(&train.features)?;
    }
    let needs_planted = kinds.iter().any(|k| k.needs_planted());
    if needs_planted && man.lift.is_some() {
        return Err(Error::Config("bounds on W* need the planted features unlifted".into()));
    }
    let planted = match (&man.planted, man.lift.is_none()) {
        (Some(p), true) => {
            p.sidecar.verify()?;
            p.train_targets.verify()?;
            p.test_targets.verify()?;
            man.test.verify()?;
            Some((
                io::read_sidecar(&p.sidecar.path)?,
                FeatureFile::read(&p.train_targets.path)?,
                FeatureFile::read(&p.test_targets.path)?,
                FeatureFile::read(&man.test.path)?,
            ))
        }
        _ => None,
    };
    let indices = match man.protocol.mode {
        Mode::Cil => harness::stream_indices(&train.labels, &man.protocol)?,
        Mode::Dil => vec![(0..train.len()).collect()],
    };
    let mut rec = StreamRecorder::with_cap(train.dim(), policy, a.cap)?;
    for idx in &indices {
        let h = train.features.select_columns(idx);
        match &planted {
            Some((_, y, _, _)) => {
                rec.observe_targets(&h, &y.features.select_columns(idx))?;
            }
            None => {
                let labels: Vec<u32> = idx.iter().map(|&i| train.labels[i]).collect();
                rec.observe_labels(&h, &labels)?;
            }
        }
    }
    let w_star: Option<Matrix> = planted.as_ref().map(|(s, ..)| s.w_star_matrix()).transpose()?;
    let ctx = match (&planted, &w_star) {
        (Some((s, _, test_y, test_x)), Some(w)) => Some(Planted {
            w_star: w,
            pool: &test_x.features,
            pool_targets: &test_y.features,
            nu: s.nu,
        }),
        _ => None,
    };
    if needs_planted && ctx.is_none() {
        return Err(Error::Config(
            "this run has no planted model; rerun with --planted <dir written by gen>".into(),
        ));
    }
    let opts = BoundOptions {
        lemma1_tol: a.lemma1_tol,
        noise_draws: a.draws,
        seed: a.seed,
    };
    let reports = report::evaluate_bounds(&rec, &kinds, ctx.as_ref(), &opts)?;
    let text = report::reports_jsonl(&reports)?;
    if let Some(p) = &a.out {
        fs::write(p, &text)?;
    }
    print!("{text}");
    let violations = reports.iter().filter(|r| r.is_violation()).count();
    eprintln!(
        "{}",
        json!({ "reports": reports.len(), "violations": violations, "method": method.name() })
    );
    Ok(())
}
