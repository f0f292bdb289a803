//! Ground-truth simulation: random DAGs with two-interval edge weights,
//! exact multivariate-normal trajectory sampling from the standardized
//! model covariance, and the repeated recovery-experiment harness.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ObservationSet, Record};
use crate::error::{Error, Result};
use crate::hsgp::{lp_structured_features, HsgpConfig};
use crate::kernel::{GraphParams, StandardizedGraphParams};
use crate::latent::{LpRow, PathwayParams};
use crate::learn::Digraph;
use crate::par;

/// Simulation configuration with the standard defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub k: usize,
    pub subjects: usize,
    pub obs_per_task: usize,
    pub mean_degree: f64,
    /// edge weight magnitudes drawn uniformly from [min, max], random sign
    pub weight_min: f64,
    pub weight_max: f64,
    pub log_l_min: f64,
    pub log_l_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub noise_var: f64,
    /// number of latent pathways (latent mode)
    pub pathways: usize,
    /// weight of the inter-subject latent component (the subject-specific
    /// component gets 1 - latent_weight)
    pub latent_weight: f64,
    /// generate from the subject-pathway model instead of the plain model
    pub latent: bool,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            k: 10,
            subjects: 100,
            obs_per_task: 25,
            mean_degree: 2.0,
            weight_min: 0.5,
            weight_max: 1.5,
            log_l_min: 0.0,
            log_l_max: 1.0,
            t_min: 0.0,
            t_max: 10.0,
            noise_var: 1e-2,
            pathways: 2,
            latent_weight: 0.3,
            latent: false,
            repetitions: 30,
            seed: 0,
        }
    }
}

/// The sampled generative state behind one dataset.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub adjacency: Digraph,
    pub params: GraphParams,
    pub pathways: Option<PathwayParams>,
    /// pathway index per subject (empty in plain mode)
    pub assignment: Vec<usize>,
}

impl GroundTruth {
    pub fn to_json(&self) -> serde_json::Value {
        let k = self.adjacency.k;
        serde_json::json!({
            "adjacency": (0..k).map(|u| {
                (0..k).map(|v| self.adjacency.has_edge(u, v)).collect::<Vec<_>>()
            }).collect::<Vec<_>>(),
            "params": self.params.to_json(),
            "pathways": self.pathways.as_ref().map(|p| p.to_json()),
            "assignment": self.assignment,
        })
    }
}

/// Sample an Erdős–Rényi DAG: undirected edges with probability
/// `mean_degree / (k - 1)`, oriented low-to-high along a uniformly random
/// permutation. Acyclic by construction.
pub fn sample_dag(k: usize, mean_degree: f64, rng: &mut ChaCha8Rng) -> Digraph {
    assert!(k >= 1 && mean_degree < k as f64);
    let p_e = if k > 1 {
        (mean_degree / (k as f64 - 1.0)).min(1.0)
    } else {
        0.0
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    // position[v] = rank of node v in the random order
    let mut position = vec![0usize; k];
    for (rank, &v) in order.iter().enumerate() {
        position[v] = rank;
    }
    let mut g = Digraph::empty(k);
    for a in 0..k {
        for b in (a + 1)..k {
            if rng.gen_bool(p_e) {
                if position[a] < position[b] {
                    g.set_edge(a, b, true);
                } else {
                    g.set_edge(b, a, true);
                }
            }
        }
    }
    g
}

/// Draw the full generative state for one repetition.
pub fn sample_ground_truth(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> GroundTruth {
    let k = cfg.k;
    let adjacency = sample_dag(k, cfg.mean_degree, rng);
    let mut s = DMatrix::identity(k, k);
    for (u, v) in adjacency.edges() {
        let magnitude = rng.gen_range(cfg.weight_min..cfg.weight_max);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        s[(v, u)] = sign * magnitude;
    }
    let log_l = DMatrix::from_fn(k, k, |_, _| rng.gen_range(cfg.log_l_min..cfg.log_l_max));
    let params = GraphParams {
        s,
        log_l,
        noise: vec![cfg.noise_var.sqrt(); k],
    };
    if !cfg.latent {
        return GroundTruth {
            adjacency,
            params,
            pathways: None,
            assignment: Vec::new(),
        };
    }
    // uniform pathway assignment, near-hard gating through extreme logits
    let p = cfg.pathways;
    let assignment: Vec<usize> = (0..cfg.subjects).map(|_| rng.gen_range(0..p)).collect();
    let logits = DMatrix::from_fn(cfg.subjects, p, |i, u| if assignment[i] == u { 8.0 } else { 0.0 });
    let log_l_sub = DMatrix::from_fn(cfg.subjects, p, |_, _| {
        rng.gen_range(cfg.log_l_min..cfg.log_l_max)
    });
    let tau = DMatrix::from_fn(cfg.subjects, p, |_, _| rng.gen_range(-0.5..0.5));
    GroundTruth {
        adjacency,
        params,
        pathways: Some(PathwayParams {
            logits,
            log_l_sub,
            tau,
            gamma: cfg.latent_weight,
        }),
        assignment,
    }
}

fn uniform_time(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> f64 {
    if cfg.t_max > cfg.t_min {
        rng.gen_range(cfg.t_min..cfg.t_max)
    } else {
        cfg.t_min
    }
}

/// Exact zero-mean multivariate-normal draw for one noiseless covariance
/// (a small jitter keeps duplicate rows factorizable).
pub fn draw_gaussian(cov: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let n = cov.nrows();
    let jittered = cov + DMatrix::identity(n, n) * 1e-10;
    let chol = jittered.cholesky().ok_or_else(|| {
        Error::Numerical("simulation covariance is not positive definite".into())
    })?;
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * z)
}

/// Sample one dataset from the generative model at random observation
/// times: exact per-subject draws in plain mode; in latent mode the shared
/// inter-subject component is drawn once from its low-rank feature map and
/// the subject-specific residual exactly per subject.
pub fn sample_trajectories(
    truth: &GroundTruth,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ObservationSet> {
    let std = truth.params.standardize()?;
    let noise_sd = cfg.noise_var.sqrt();
    let mut records = Vec::with_capacity(cfg.subjects * cfg.k * cfg.obs_per_task);

    // observation times, per subject
    let mut subject_rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(cfg.subjects);
    for _ in 0..cfg.subjects {
        let mut rows = Vec::with_capacity(cfg.k * cfg.obs_per_task);
        for task in 0..cfg.k {
            for _ in 0..cfg.obs_per_task {
                rows.push((task, uniform_time(cfg, rng)));
            }
        }
        subject_rows.push(rows);
    }

    match &truth.pathways {
        None => {
            for (subject, rows) in subject_rows.iter().enumerate() {
                let cov = std.assemble_cross(rows, rows);
                let f = draw_gaussian(&cov, rng)?;
                for (x, &(task, time)) in rows.iter().enumerate() {
                    let value = f[x] + noise_sd * rng.sample::<f64, _>(StandardNormal);
                    records.push(Record { subject, task, time, value });
                }
            }
        }
        Some(pw) => {
            // shared latent component over all subjects at once
            let lp_rows: Vec<LpRow> = subject_rows
                .iter()
                .enumerate()
                .flat_map(|(i, rows)| rows.iter().map(move |&(v, t)| (i, v, t)))
                .collect();
            let max_abs = lp_rows
                .iter()
                .map(|&(i, _, t)| {
                    (0..pw.pathway_count())
                        .map(|u| (t - pw.tau[(i, u)]).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            let hsgp = HsgpConfig::from_extent(max_abs + 1e-6, 96, 2.0);
            let features = lp_structured_features(&std, pw, &lp_rows, &hsgp)?;
            let z = DVector::from_fn(features.phi.ncols(), |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let latent = &features.phi * z;
            let scale = (1.0 - pw.gamma).sqrt();
            let mut offset = 0;
            for (subject, rows) in subject_rows.iter().enumerate() {
                let cov = std.assemble_cross(rows, rows);
                let f = draw_gaussian(&cov, rng)?;
                for (x, &(task, time)) in rows.iter().enumerate() {
                    let value = latent[offset + x]
                        + scale * f[x]
                        + noise_sd * rng.sample::<f64, _>(StandardNormal);
                    records.push(Record { subject, task, time, value });
                }
                offset += rows.len();
            }
        }
    }
    ObservationSet::new(records, cfg.k, cfg.subjects)
}

/// Convenience wrapper exposing the standardized generative parameters.
pub fn standardized(truth: &GroundTruth) -> Result<StandardizedGraphParams> {
    truth.params.standardize()
}

/// Per-repetition recovery scores produced by a fitting procedure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepMetrics {
    pub shd: f64,
    pub f1: f64,
    pub ari: Option<f64>,
    pub nmi: Option<f64>,
}

/// All repetitions of one setting; failed repetitions are kept as `None`
/// with the error message.
#[derive(Debug)]
pub struct RecoveryReport {
    pub subjects: usize,
    pub outcomes: Vec<std::result::Result<RepMetrics, String>>,
}

/// Median and interquartile range of one metric.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricSummary {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn summarize(values: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(MetricSummary {
        median: quantile(&sorted, 0.5),
        q25: quantile(&sorted, 0.25),
        q75: quantile(&sorted, 0.75),
    })
}

/// Run repeated generate-fit-score cycles in parallel. Each repetition owns
/// an RNG stream derived from `(cfg.seed, repetition)`; failures are
/// recorded and excluded from summaries.
pub fn recovery_experiment<F>(cfg: &SimConfig, repetitions: usize, fit: F) -> RecoveryReport
where
    F: Fn(&GroundTruth, &ObservationSet) -> Result<RepMetrics> + Sync,
{
    let outcomes = par::map_indexed(repetitions, |rep| {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let truth = sample_ground_truth(cfg, &mut rng);
        let mut run = || -> Result<RepMetrics> {
            let obs = sample_trajectories(&truth, cfg, &mut rng)?;
            fit(&truth, &obs)
        };
        run().map_err(|e| e.to_string())
    });
    RecoveryReport {
        subjects: cfg.subjects,
        outcomes,
    }
}

impl RecoveryReport {
    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_err()).count()
    }

    fn collect<G: Fn(&RepMetrics) -> Option<f64>>(&self, get: G) -> Vec<f64> {
        self.outcomes
            .iter()
            .filter_map(|o| o.as_ref().ok().and_then(&get))
            .collect()
    }

    pub fn shd_summary(&self) -> Option<MetricSummary> {
        summarize(&self.collect(|m| Some(m.shd)))
    }

    pub fn f1_summary(&self) -> Option<MetricSummary> {
        summarize(&self.collect(|m| Some(m.f1)))
    }

    pub fn ari_summary(&self) -> Option<MetricSummary> {
        summarize(&self.collect(|m| m.ari))
    }

    pub fn nmi_summary(&self) -> Option<MetricSummary> {
        summarize(&self.collect(|m| m.nmi))
    }

    /// JSON lines: one record per repetition.
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for (rep, outcome) in self.outcomes.iter().enumerate() {
            let line = match outcome {
                Ok(m) => serde_json::json!({
                    "subjects": self.subjects, "rep": rep,
                    "shd": m.shd, "f1": m.f1, "ari": m.ari, "nmi": m.nmi,
                }),
                Err(e) => serde_json::json!({
                    "subjects": self.subjects, "rep": rep, "error": e,
                }),
            };
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Aggregated summary with the metric conventions recorded.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "subjects": self.subjects,
            "repetitions": self.outcomes.len(),
            "failures": self.failures(),
            "shd": self.shd_summary(),
            "f1": self.f1_summary(),
            "ari": self.ari_summary(),
            "nmi": self.nmi_summary(),
            "nmi_normalization": "arithmetic-mean",
            "shd_reversal_cost": 1,
        })
    }
}

/// Plot-ready CSV across settings: one row per (subject count, metric) with
/// the median and the interquartile band.
pub fn write_plot_csv<W: std::io::Write>(reports: &[RecoveryReport], mut w: W) -> Result<()> {
    writeln!(w, "subjects,metric,median,ylo,yhi")?;
    for report in reports {
        for (name, summary) in [
            ("shd", report.shd_summary()),
            ("f1", report.f1_summary()),
            ("ari", report.ari_summary()),
            ("nmi", report.nmi_summary()),
        ] {
            if let Some(s) = summary {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    report.subjects, name, s.median, s.q25, s.q75
                )?;
            }
        }
    }
    Ok(())
}
