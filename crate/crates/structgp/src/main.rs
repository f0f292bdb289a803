//! Command-line entry points: simulation, fitting, prediction,
//! evaluation, and graph export, tied together by a reproducible
//! key = value configuration that is echoed into every output artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use structgp::bundle::{write_atomic, ModelBundle};
use structgp::config::RunConfig;
use structgp::data::{self, normal_score_transform, ObservationSet, TaskCatalog};
use structgp::fit::{self, FitMode, FitSettings};
use structgp::gp;
use structgp::latent::{self, LpRow};
use structgp::learn::Digraph;
use structgp::metrics;
use structgp::sim::{self, GroundTruth, RepMetrics};
use structgp::{Error, Result};

#[derive(Parser)]
#[command(
    name = "structgp",
    version,
    about = "Multi-task Gaussian processes with learnable task structure and latent pathways"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic observations (and optionally run the full
    /// structure-recovery experiment)
    Simulate(SimulateArgs),
    /// Fit a model to an observation CSV and write a model bundle
    Fit(FitArgs),
    /// Forecast query points from a fitted model bundle
    Predict(PredictArgs),
    /// Score a forecast CSV against held-out truth
    Eval(EvalArgs),
    /// Re-emit the learned task graph from a bundle as DOT or JSON
    ExportGraph(ExportGraphArgs),
}

/// Configuration shared by every subcommand: an optional key = value
/// file, then individual overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Path to a key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set seed=7 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for the generated artifacts
    #[arg(long)]
    output_dir: PathBuf,
    /// Also run the repeated fit-and-score recovery experiment
    #[arg(long)]
    recovery: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training observations (subject_id,task_id,time,value)
    #[arg(long)]
    data: PathBuf,
    /// Directory for the model bundle and graph export
    #[arg(long)]
    output_dir: PathBuf,
    /// Apply the rank-based normal-score transform before fitting
    #[arg(long)]
    transform: bool,
    /// Existing bundle whose graph parameters are frozen (lp-fixed mode)
    #[arg(long)]
    graph_bundle: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Fitted model bundle
    #[arg(long)]
    bundle: PathBuf,
    /// Query points (subject_id,task_id,time)
    #[arg(long)]
    query: Option<PathBuf>,
    /// Conditioning observations (subject_id,task_id,time,value)
    #[arg(long)]
    conditioning: Option<PathBuf>,
    /// Single CSV windowed by time: rows before this time condition the
    /// forecast
    #[arg(long)]
    data: Option<PathBuf>,
    /// With --data: conditioning set is rows with time < this value
    #[arg(long)]
    condition_before: Option<f64>,
    /// With --data: query set is rows with time >= this value
    #[arg(long)]
    query_after: Option<f64>,
    /// Output forecast CSV
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Forecast CSV produced by `predict`
    #[arg(long)]
    forecast: PathBuf,
    /// Truth CSV (subject_id,task_id,time,value), row-aligned with the
    /// forecast
    #[arg(long)]
    truth: PathBuf,
    /// Output metrics JSON
    #[arg(long)]
    output: PathBuf,
    /// Bootstrap resamples over subjects for the confidence intervals
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
}

#[derive(Args)]
struct ExportGraphArgs {
    /// Fitted model bundle
    #[arg(long)]
    bundle: PathBuf,
    /// Output path
    #[arg(long)]
    output: PathBuf,
    /// Output format
    #[arg(long, value_parser = ["dot", "json"], default_value = "dot")]
    format: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Fit(args) => cmd_fit(&args),
        Command::Predict(args) => cmd_predict(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::ExportGraph(args) => cmd_export_graph(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())
}

/// Catalog naming the simulated tasks/subjects by their indices.
fn simulated_catalog(k: usize, r: usize) -> TaskCatalog {
    TaskCatalog {
        names: (0..k).map(|v| format!("task_{v}")).collect(),
        derived: Vec::new(),
        subjects: (0..r).map(|i| i.to_string()).collect(),
    }
}

/// Fit one simulated repetition and score it against the ground truth.
fn score_repetition(
    truth: &GroundTruth,
    obs: &ObservationSet,
    settings: &FitSettings,
) -> Result<RepMetrics> {
    let result = fit::fit(obs, settings, None)?;
    let learned = match &result.structure {
        Some(s) => s.adjacency.clone(),
        None => Digraph::from_amplitudes(&result.params.s),
    };
    let shd = metrics::shd(&learned, &truth.adjacency) as f64;
    let f1 = metrics::edge_f1(&learned, &truth.adjacency);
    let (ari, nmi) = match &result.pathways {
        Some(pw) if !truth.assignment.is_empty() => {
            let assignment = latent::assign_pathways(pw).assignment;
            (
                Some(metrics::ari(&assignment, &truth.assignment)),
                Some(metrics::nmi(&assignment, &truth.assignment)),
            )
        }
        _ => (None, None),
    };
    Ok(RepMetrics { shd, f1, ari, nmi })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let sim_cfg = cfg.sim_config();
    std::fs::create_dir_all(&args.output_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(sim_cfg.seed);
    let truth = sim::sample_ground_truth(&sim_cfg, &mut rng);
    let obs = sim::sample_trajectories(&truth, &sim_cfg, &mut rng)?;
    let catalog = simulated_catalog(sim_cfg.k, sim_cfg.subjects);

    let mut csv_bytes = Vec::new();
    data::write_csv(&obs, &catalog, &mut csv_bytes)?;
    write_atomic(&args.output_dir.join("observations.csv"), &csv_bytes)?;
    write_json(
        &args.output_dir.join("ground_truth.json"),
        &serde_json::json!({ "config": cfg.echo(), "truth": truth.to_json() }),
    )?;
    println!(
        "simulated {} observations for {} subjects x {} tasks",
        obs.len(),
        sim_cfg.subjects,
        sim_cfg.k
    );

    if args.recovery {
        let settings = cfg.fit_settings();
        let report = sim::recovery_experiment(&sim_cfg, sim_cfg.repetitions, |truth, obs| {
            score_repetition(truth, obs, &settings)
        });
        let mut jsonl = Vec::new();
        report.write_jsonl(&mut jsonl)?;
        write_atomic(&args.output_dir.join("recovery_metrics.jsonl"), &jsonl)?;
        write_json(
            &args.output_dir.join("recovery_summary.json"),
            &serde_json::json!({ "config": cfg.echo(), "summary": report.summary_json() }),
        )?;
        let mut plot = Vec::new();
        sim::write_plot_csv(std::slice::from_ref(&report), &mut plot)?;
        write_atomic(&args.output_dir.join("recovery_plot.csv"), &plot)?;
        println!(
            "recovery experiment: {} repetitions, {} failures",
            sim_cfg.repetitions,
            report.failures()
        );
    }
    Ok(())
}

/// DOT for an unthresholded amplitude matrix (baseline modes that carry
/// no learned structure): every nonzero off-diagonal entry is an edge.
fn dense_dot(s: &DMatrix<f64>, task_names: &[String]) -> String {
    let name = |i: usize| -> String {
        task_names
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("task_{i}"))
    };
    let k = s.nrows();
    let mut out = String::from("digraph structure {\n");
    for i in 0..k {
        out.push_str(&format!("  \"{}\";\n", name(i)));
    }
    for u in 0..k {
        for v in 0..k {
            let w = s[(v, u)];
            if u == v || w == 0.0 {
                continue;
            }
            let style = if w >= 0.0 { "solid" } else { "dashed" };
            out.push_str(&format!(
                "  \"{}\" -> \"{}\" [style={}, label=\"{:.4}\"];\n",
                name(u),
                name(v),
                style,
                w
            ));
        }
    }
    out.push_str("}\n");
    out
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let settings = cfg.fit_settings();
    std::fs::create_dir_all(&args.output_dir)?;

    let (raw_obs, catalog) = data::ingest_csv(&args.data)?;
    let (obs, transform) = if args.transform {
        let all: Vec<usize> = (0..raw_obs.subject_count()).collect();
        let (transformed, state) = normal_score_transform(&raw_obs, &all)?;
        (transformed, Some(state))
    } else {
        (raw_obs, None)
    };

    let frozen = match settings.mode {
        FitMode::LpFixed => {
            let path = args.graph_bundle.as_ref().ok_or_else(|| {
                Error::Config("lp-fixed mode requires --graph-bundle".into())
            })?;
            Some(ModelBundle::load(path)?.params)
        }
        _ => {
            if args.graph_bundle.is_some() {
                return Err(Error::Config(
                    "--graph-bundle is only meaningful in lp-fixed mode".into(),
                ));
            }
            None
        }
    };

    let result = fit::fit(&obs, &settings, frozen.as_ref())?;
    println!(
        "fit mode={} nmll={:.6} smooth_h={:.3e}",
        result.mode, result.nmll, result.smooth_h
    );

    let dot = match &result.structure {
        Some(s) => s.to_dot(&catalog.names),
        None => dense_dot(&result.params.s, &catalog.names),
    };
    write_atomic(&args.output_dir.join("graph.dot"), dot.as_bytes())?;

    let bundle = ModelBundle::from_fit(
        result,
        transform,
        catalog.names.clone(),
        catalog.subjects.clone(),
        &cfg,
    );
    bundle.save(args.output_dir.join("model.json"))?;
    Ok(())
}

/// One parsed prediction-input row; `value` is None for query-only rows.
struct InputRow {
    subject: String,
    task: usize,
    time: f64,
    value: Option<f64>,
}

/// Read a CSV with subject_id/task_id/time columns (and optionally a
/// value column), mapping task labels through the bundle's task list.
fn read_rows(path: &Path, tasks: &[String], need_value: bool) -> Result<Vec<InputRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (ci, cj, ct) = match (col("subject_id"), col("task_id"), col("time")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::Data(format!(
                "{}: expected subject_id, task_id, time columns",
                path.display()
            )))
        }
    };
    let cv = col("value");
    if need_value && cv.is_none() {
        return Err(Error::Data(format!("{}: missing value column", path.display())));
    }
    let mut rows = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 2;
        let row = row?;
        let get = |c: usize| {
            row.get(c).ok_or_else(|| {
                Error::Data(format!("{}: line {line}: missing field", path.display()))
            })
        };
        let task_tok = get(cj)?;
        let task = tasks.iter().position(|n| n == task_tok).ok_or_else(|| {
            Error::Data(format!(
                "{}: line {line}: task {task_tok:?} not in the fitted model",
                path.display()
            ))
        })?;
        let time: f64 = get(ct)?.parse().map_err(|_| {
            Error::Data(format!("{}: line {line}: bad time", path.display()))
        })?;
        let value = match cv {
            Some(c) if need_value => Some(get(c)?.parse().map_err(|_| {
                Error::Data(format!("{}: line {line}: bad value", path.display()))
            })?),
            _ => None,
        };
        rows.push(InputRow {
            subject: get(ci)?.to_string(),
            task,
            time,
            value,
        });
    }
    Ok(rows)
}

/// Forecast for one query row.
struct ForecastRow {
    mean: f64,
    variance: f64,
    lo95: f64,
    hi95: f64,
}

fn prior_forecast(variance: f64) -> ForecastRow {
    let sd = variance.sqrt();
    ForecastRow {
        mean: 0.0,
        variance,
        lo95: -gp::Z95 * sd,
        hi95: gp::Z95 * sd,
    }
}

fn forecast_from(post: &gp::PosteriorForecast, q: usize) -> ForecastRow {
    ForecastRow {
        mean: post.mean[q],
        variance: post.variance[q],
        lo95: post.lo95[q],
        hi95: post.hi95[q],
    }
}

/// Per-subject conditioning with the task-structure kernel.
fn predict_structgp(
    bundle: &ModelBundle,
    conditioning: &[InputRow],
    query: &[InputRow],
) -> Result<Vec<ForecastRow>> {
    let std = bundle.params.standardize()?;
    let noise_var = |task: usize| bundle.params.noise[task].powi(2);

    let mut by_subject: BTreeMap<&str, Vec<&InputRow>> = BTreeMap::new();
    for row in conditioning {
        by_subject.entry(&row.subject).or_default().push(row);
    }
    let mut query_groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (q, row) in query.iter().enumerate() {
        query_groups.entry(&row.subject).or_default().push(q);
    }

    let mut out: Vec<Option<ForecastRow>> = (0..query.len()).map(|_| None).collect();
    for (subject, q_idx) in query_groups {
        let train = by_subject.get(subject).map(Vec::as_slice).unwrap_or(&[]);
        if train.is_empty() {
            for &q in &q_idx {
                let v = query[q].task;
                out[q] = Some(prior_forecast(std.cross_cov(v, v, 0.0) + noise_var(v)));
            }
            continue;
        }
        let rows: Vec<(usize, f64)> = train.iter().map(|r| (r.task, r.time)).collect();
        let y = DVector::from_iterator(train.len(), train.iter().map(|r| r.value.unwrap()));
        let q_rows: Vec<(usize, f64)> =
            q_idx.iter().map(|&q| (query[q].task, query[q].time)).collect();
        let k_train = std.assemble_train(&rows);
        let k_cross = std.assemble_cross(&rows, &q_rows);
        let prior: Vec<f64> = q_rows.iter().map(|&(v, _)| std.cross_cov(v, v, 0.0)).collect();
        let q_noise: Vec<f64> = q_rows.iter().map(|&(v, _)| noise_var(v)).collect();
        let post = gp::posterior_predict(&k_train, &k_cross, &prior, &y, &q_noise)?;
        for (slot, &q) in q_idx.iter().enumerate() {
            out[q] = Some(forecast_from(&post, slot));
        }
    }
    Ok(out.into_iter().map(|f| f.unwrap()).collect())
}

/// Joint conditioning with the latent-pathway kernel; subjects must be
/// known from training so their pathway parameters exist.
fn predict_lp(
    bundle: &ModelBundle,
    conditioning: &[InputRow],
    query: &[InputRow],
) -> Result<Vec<ForecastRow>> {
    let pw = bundle.pathways.as_ref().ok_or_else(|| {
        Error::Data("bundle is in a latent-pathway mode but has no pathway parameters".into())
    })?;
    let std = bundle.params.standardize()?;
    let subject_index = |label: &str| -> Result<usize> {
        bundle
            .subjects
            .iter()
            .position(|s| s == label)
            .ok_or_else(|| {
                Error::Data(format!(
                    "subject {label:?} was not seen during training; latent-pathway \
                     prediction requires a trained pathway assignment"
                ))
            })
    };
    let to_lp = |rows: &[InputRow]| -> Result<Vec<LpRow>> {
        rows.iter()
            .map(|r| Ok((subject_index(&r.subject)?, r.task, r.time)))
            .collect()
    };
    let train_rows = to_lp(conditioning)?;
    let q_rows = to_lp(query)?;
    let noise_var = |task: usize| bundle.params.noise[task].powi(2);
    let prior: Vec<f64> = q_rows
        .iter()
        .map(|&(i, v, t)| latent::lp_cross_cov(&std, pw, i, i, v, v, t, t))
        .collect();
    if train_rows.is_empty() {
        return Ok(q_rows
            .iter()
            .zip(&prior)
            .map(|(&(_, v, _), &p)| prior_forecast(p + noise_var(v)))
            .collect());
    }
    let y = DVector::from_iterator(
        conditioning.len(),
        conditioning.iter().map(|r| r.value.unwrap()),
    );
    let k_train = latent::assemble_train_lp(&std, pw, &train_rows);
    let k_cross = latent::assemble_cross_lp(&std, pw, &train_rows, &q_rows);
    let q_noise: Vec<f64> = q_rows.iter().map(|&(_, v, _)| noise_var(v)).collect();
    let post = gp::posterior_predict(&k_train, &k_cross, &prior, &y, &q_noise)?;
    Ok((0..query.len()).map(|q| forecast_from(&post, q)).collect())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.bundle)?;

    let (mut conditioning, query) = match (&args.query, &args.data) {
        (Some(query_path), None) => {
            if args.condition_before.is_some() || args.query_after.is_some() {
                return Err(Error::Config(
                    "--condition-before/--query-after apply only with --data".into(),
                ));
            }
            let conditioning = match &args.conditioning {
                Some(path) => read_rows(path, &bundle.tasks, true)?,
                None => Vec::new(),
            };
            (conditioning, read_rows(query_path, &bundle.tasks, false)?)
        }
        (None, Some(data_path)) => {
            let (before, after) = match (args.condition_before, args.query_after) {
                (Some(b), Some(a)) => (b, a),
                _ => {
                    return Err(Error::Config(
                        "--data requires both --condition-before and --query-after".into(),
                    ))
                }
            };
            let rows = read_rows(data_path, &bundle.tasks, true)?;
            let mut conditioning = Vec::new();
            let mut query = Vec::new();
            for row in rows {
                if row.time < before {
                    conditioning.push(row);
                } else if row.time >= after {
                    query.push(row);
                }
            }
            (conditioning, query)
        }
        _ => {
            return Err(Error::Config(
                "provide exactly one of --query or --data".into(),
            ))
        }
    };

    // conditioning happens in the model's (transformed) space
    if let Some(transform) = &bundle.transform {
        for row in &mut conditioning {
            row.value = row.value.map(|x| transform.forward(row.task, x));
        }
    }

    let lp_mode = matches!(bundle.mode, FitMode::LpStructGp | FitMode::LpFixed);
    let mut forecasts = if lp_mode {
        predict_lp(&bundle, &conditioning, &query)?
    } else {
        predict_structgp(&bundle, &conditioning, &query)?
    };

    // means and interval endpoints map back through the monotone inverse
    // transform; the variance column stays in the transformed space
    if let Some(transform) = &bundle.transform {
        for (row, f) in query.iter().zip(forecasts.iter_mut()) {
            f.mean = transform.inverse(row.task, f.mean);
            f.lo95 = transform.inverse(row.task, f.lo95);
            f.hi95 = transform.inverse(row.task, f.hi95);
        }
    }

    let mut bytes = Vec::new();
    {
        let mut wtr = csv::Writer::from_writer(&mut bytes);
        wtr.write_record(["subject_id", "task_id", "time", "mean", "variance", "lo95", "hi95"])?;
        for (row, f) in query.iter().zip(&forecasts) {
            wtr.write_record([
                row.subject.clone(),
                bundle.tasks[row.task].clone(),
                row.time.to_string(),
                f.mean.to_string(),
                f.variance.to_string(),
                f.lo95.to_string(),
                f.hi95.to_string(),
            ])?;
        }
        wtr.flush()?;
    }
    write_atomic(&args.output, &bytes)?;
    println!(
        "forecast {} query points from {} conditioning points",
        query.len(),
        conditioning.len()
    );
    Ok(())
}

/// One aligned forecast/truth pair.
struct ScoredRow {
    subject: String,
    task: String,
    err: f64,
    covered: bool,
}

fn metric_block(rows: &[&ScoredRow]) -> serde_json::Value {
    let n = rows.len() as f64;
    let mse = rows.iter().map(|r| r.err * r.err).sum::<f64>() / n;
    let mae = rows.iter().map(|r| r.err.abs()).sum::<f64>() / n;
    let coverage = rows.iter().filter(|r| r.covered).count() as f64 / n;
    serde_json::json!({
        "count": rows.len(),
        "rmse": mse.sqrt(),
        "mse": mse,
        "mae": mae,
        "coverage95": coverage,
    })
}

/// Macro averages: metrics computed per task, then averaged.
fn macro_metrics(rows: &[&ScoredRow]) -> [f64; 4] {
    let mut by_task: BTreeMap<&str, Vec<&ScoredRow>> = BTreeMap::new();
    for row in rows {
        by_task.entry(&row.task).or_default().push(row);
    }
    let mut acc = [0.0; 4]; // rmse, mse, mae, coverage
    let t = by_task.len() as f64;
    for rows in by_task.values() {
        let n = rows.len() as f64;
        let mse = rows.iter().map(|r| r.err * r.err).sum::<f64>() / n;
        acc[0] += mse.sqrt() / t;
        acc[1] += mse / t;
        acc[2] += rows.iter().map(|r| r.err.abs()).sum::<f64>() / (n * t);
        acc[3] += rows.iter().filter(|r| r.covered).count() as f64 / (n * t);
    }
    acc
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.config.resolve()?;

    let load = |path: &Path, want: &[&str]| -> Result<(Vec<usize>, Vec<csv::StringRecord>)> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = rdr.headers()?.clone();
        let cols = want
            .iter()
            .map(|name| {
                headers.iter().position(|h| h == *name).ok_or_else(|| {
                    Error::Data(format!("{}: missing column {name:?}", path.display()))
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        let rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok((cols, rows))
    };

    let (f_cols, f_rows) = load(
        &args.forecast,
        &["subject_id", "task_id", "time", "mean", "lo95", "hi95"],
    )?;
    let (t_cols, t_rows) = load(&args.truth, &["subject_id", "task_id", "time", "value"])?;
    if f_rows.len() != t_rows.len() {
        return Err(Error::Data(format!(
            "misaligned rows: forecast has {}, truth has {}",
            f_rows.len(),
            t_rows.len()
        )));
    }

    let mut scored = Vec::with_capacity(f_rows.len());
    for (idx, (f, t)) in f_rows.iter().zip(&t_rows).enumerate() {
        let line = idx + 2;
        let f_field = |i: usize| f.get(f_cols[i]).unwrap_or("");
        let t_field = |i: usize| t.get(t_cols[i]).unwrap_or("");
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Data(format!("line {line}: bad {what} {s:?}")))
        };
        let (ft, tt) = (parse(f_field(2), "time")?, parse(t_field(2), "time")?);
        if f_field(0) != t_field(0) || f_field(1) != t_field(1) || ft != tt {
            return Err(Error::Data(format!(
                "misaligned rows at line {line}: forecast ({}, {}, {}) vs truth ({}, {}, {})",
                f_field(0),
                f_field(1),
                ft,
                t_field(0),
                t_field(1),
                tt
            )));
        }
        let truth = parse(t_field(3), "value")?;
        let mean = parse(f_field(3), "mean")?;
        let lo = parse(f_field(4), "lo95")?;
        let hi = parse(f_field(5), "hi95")?;
        scored.push(ScoredRow {
            subject: f_field(0).to_string(),
            task: f_field(1).to_string(),
            err: mean - truth,
            covered: lo <= truth && truth <= hi,
        });
    }
    if scored.is_empty() {
        return Err(Error::Data("no rows to evaluate".into()));
    }

    let all: Vec<&ScoredRow> = scored.iter().collect();
    let mut per_task: BTreeMap<&str, Vec<&ScoredRow>> = BTreeMap::new();
    let mut by_subject: BTreeMap<&str, Vec<&ScoredRow>> = BTreeMap::new();
    for row in &scored {
        per_task.entry(&row.task).or_default().push(row);
        by_subject.entry(&row.subject).or_default().push(row);
    }

    // bootstrap over subjects: resample subjects with replacement and
    // recompute the macro metrics
    let subjects: Vec<&str> = by_subject.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples: [Vec<f64>; 4] = Default::default();
    for _ in 0..args.bootstrap {
        let mut resampled: Vec<&ScoredRow> = Vec::with_capacity(scored.len());
        for _ in 0..subjects.len() {
            let s = subjects[rng.gen_range(0..subjects.len())];
            resampled.extend_from_slice(&by_subject[s]);
        }
        let m = macro_metrics(&resampled);
        for (bucket, value) in samples.iter_mut().zip(m) {
            bucket.push(value);
        }
    }
    let ci = |bucket: &mut Vec<f64>| -> serde_json::Value {
        if bucket.is_empty() {
            return serde_json::Value::Null;
        }
        bucket.sort_by(|a, b| a.partial_cmp(b).unwrap());
        serde_json::json!([percentile(bucket, 0.025), percentile(bucket, 0.975)])
    };
    let [mut b_rmse, mut b_mse, mut b_mae, mut b_cov] = samples;

    let macro_all = macro_metrics(&all);
    let report = serde_json::json!({
        "config": cfg.echo(),
        "rows": scored.len(),
        "subjects": subjects.len(),
        "pooled": metric_block(&all),
        "per_task": per_task.iter()
            .map(|(task, rows)| ((*task).to_string(), metric_block(rows)))
            .collect::<BTreeMap<String, serde_json::Value>>(),
        "macro": {
            "rmse": macro_all[0],
            "mse": macro_all[1],
            "mae": macro_all[2],
            "coverage95": macro_all[3],
        },
        "bootstrap95": {
            "resamples": args.bootstrap,
            "rmse": ci(&mut b_rmse),
            "mse": ci(&mut b_mse),
            "mae": ci(&mut b_mae),
            "coverage95": ci(&mut b_cov),
        },
    });
    write_json(&args.output, &report)?;
    println!(
        "evaluated {} rows: macro rmse {:.4}, coverage {:.3}",
        scored.len(),
        macro_all[0],
        macro_all[3]
    );
    Ok(())
}

fn cmd_export_graph(args: &ExportGraphArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.bundle)?;
    let text = match (args.format.as_str(), &bundle.structure) {
        ("dot", Some(s)) => s.to_dot(&bundle.tasks),
        ("dot", None) => dense_dot(&bundle.params.s, &bundle.tasks),
        ("json", Some(s)) => serde_json::to_string_pretty(&serde_json::json!({
            "config": bundle.config,
            "structure": s.to_json(),
        }))?,
        ("json", None) => {
            return Err(Error::Data(
                "bundle has no learned structure to export as JSON; \
                 use --format dot for the raw amplitude graph"
                    .into(),
            ))
        }
        _ => unreachable!("clap validates --format"),
    };
    write_atomic(&args.output, text.as_bytes())?;
    Ok(())
}
