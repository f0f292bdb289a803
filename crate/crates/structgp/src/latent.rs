//! Latent-pathway extension of the inter-task kernel.
//!
//! Subjects couple to a small set of shared latent pathways through
//! shifted-Gaussian filters with softmax-gated amplitudes. The combined
//! covariance mixes a subject-specific component (the plain inter-task
//! kernel) with an inter-subject component carried by the shared pathways,
//! weighted by a fixed gating coefficient `gamma`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernel::StandardizedGraphParams;

/// Subject-pathway coupling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayParams {
    /// r x p pre-softmax coupling logits
    pub logits: DMatrix<f64>,
    /// r x p log-lengthscales of the subject filters
    pub log_l_sub: DMatrix<f64>,
    /// r x p time shifts
    pub tau: DMatrix<f64>,
    /// fixed gating coefficient in [0, 1]: weight of the inter-subject
    /// component; (1 - gamma) weights the subject-specific component
    pub gamma: f64,
}

/// Hard pathway assignment (argmax of the gating weights) plus the full
/// per-subject probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayAssignment {
    pub assignment: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

/// Shifted Gaussian subject filter `amp * exp(-(t - tau)^2 / ell)`.
pub fn subject_filter(amp: f64, ell: f64, tau: f64, t: f64) -> f64 {
    debug_assert!(ell > 0.0);
    let d = t - tau;
    amp * (-d * d / ell).exp()
}

/// Stable softmax with max-subtraction.
pub fn gating_weights(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Closed-form correlation of two source-filter/subject-filter convolution
/// chains: a squared exponential in the lag with all four lengthscales
/// summed, centered at the difference of the subject shifts.
fn triple_conv(l_vq: f64, l_wq: f64, ls_i: f64, ls_ip: f64, x: f64) -> f64 {
    let total = l_vq + l_wq + ls_i + ls_ip;
    PI.powf(1.5) * (l_vq * l_wq * ls_i * ls_ip / total).sqrt() * (-x * x / total).exp()
}

impl PathwayParams {
    pub fn pathway_count(&self) -> usize {
        self.logits.ncols()
    }

    pub fn subject_count(&self) -> usize {
        self.logits.nrows()
    }

    pub fn ell_sub(&self, i: usize, u: usize) -> f64 {
        self.log_l_sub[(i, u)].exp()
    }

    /// Softmax gating weights of one subject.
    pub fn weights_of(&self, subject: usize) -> Vec<f64> {
        let row: Vec<f64> = (0..self.pathway_count())
            .map(|u| self.logits[(subject, u)])
            .collect();
        gating_weights(&row)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(PathwayParamsJson::from(self)).unwrap()
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let j: PathwayParamsJson = serde_json::from_value(v.clone())?;
        j.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct PathwayParamsJson {
    p: usize,
    #[serde(rename = "S_sub")]
    logits: Vec<Vec<f64>>,
    #[serde(rename = "logL_sub")]
    log_l_sub: Vec<Vec<f64>>,
    tau: Vec<Vec<f64>>,
    gamma: f64,
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn mat_from(rows: &[Vec<f64>], p: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::Data("ragged matrix in pathway JSON".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

impl From<&PathwayParams> for PathwayParamsJson {
    fn from(pw: &PathwayParams) -> Self {
        Self {
            p: pw.pathway_count(),
            logits: mat_rows(&pw.logits),
            log_l_sub: mat_rows(&pw.log_l_sub),
            tau: mat_rows(&pw.tau),
            gamma: pw.gamma,
        }
    }
}

impl TryFrom<PathwayParamsJson> for PathwayParams {
    type Error = Error;
    fn try_from(j: PathwayParamsJson) -> Result<Self> {
        Ok(Self {
            logits: mat_from(&j.logits, j.p)?,
            log_l_sub: mat_from(&j.log_l_sub, j.p)?,
            tau: mat_from(&j.tau, j.p)?,
            gamma: j.gamma,
        })
    }
}

/// Combined subject-aware covariance between `(i, v, t)` and `(i', w, t')`.
pub fn lp_cross_cov(
    graph: &StandardizedGraphParams,
    pw: &PathwayParams,
    i: usize,
    ip: usize,
    v: usize,
    w: usize,
    t: f64,
    tp: f64,
) -> f64 {
    let dt = t - tp;
    let mut acc = 0.0;
    if i == ip && pw.gamma < 1.0 {
        acc += (1.0 - pw.gamma) * graph.cross_cov(v, w, dt);
    }
    if pw.gamma > 0.0 {
        let wi = pw.weights_of(i);
        let wip = pw.weights_of(ip);
        let k = graph.task_count();
        let mut latent = 0.0;
        for u in 0..pw.pathway_count() {
            let pi2 = wi[u] * wip[u];
            if pi2 == 0.0 {
                continue;
            }
            let shift = pw.tau[(i, u)] - pw.tau[(ip, u)];
            let ls_i = pw.ell_sub(i, u);
            let ls_ip = pw.ell_sub(ip, u);
            let mut src = 0.0;
            for q in 0..k {
                let sv = graph.s_tilde[(v, q)];
                let sw = graph.s_tilde[(w, q)];
                if sv == 0.0 || sw == 0.0 {
                    continue;
                }
                src += sv
                    * sw
                    * triple_conv(graph.ell(v, q), graph.ell(w, q), ls_i, ls_ip, shift - dt);
            }
            latent += pi2 * src;
        }
        acc += pw.gamma * latent;
    }
    acc
}

/// Rows for the subject-aware covariance: `(subject, task, time)`.
pub type LpRow = (usize, usize, f64);

/// Cross-covariance matrix between two row sets, no noise diagonal.
pub fn assemble_cross_lp(
    graph: &StandardizedGraphParams,
    pw: &PathwayParams,
    a: &[LpRow],
    b: &[LpRow],
) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |x, y| {
        lp_cross_cov(graph, pw, a[x].0, b[y].0, a[x].1, b[y].1, a[x].2, b[y].2)
    })
}

/// Training covariance over one row set with the noise diagonal added.
pub fn assemble_train_lp(
    graph: &StandardizedGraphParams,
    pw: &PathwayParams,
    a: &[LpRow],
) -> DMatrix<f64> {
    let n = a.len();
    let mut m = DMatrix::zeros(n, n);
    for x in 0..n {
        for y in x..n {
            let v = lp_cross_cov(graph, pw, a[x].0, a[y].0, a[x].1, a[y].1, a[x].2, a[y].2);
            m[(x, y)] = v;
            m[(y, x)] = v;
        }
        m[(x, x)] += graph.noise[a[x].1].powi(2);
    }
    m
}

/// Argmax pathway per subject; ties break to the lowest pathway index.
pub fn assign_pathways(pw: &PathwayParams) -> PathwayAssignment {
    let mut assignment = Vec::with_capacity(pw.subject_count());
    let mut weights = Vec::with_capacity(pw.subject_count());
    for i in 0..pw.subject_count() {
        let w = pw.weights_of(i);
        let mut best = 0;
        for (u, &x) in w.iter().enumerate() {
            if x > w[best] {
                best = u;
            }
        }
        assignment.push(best);
        weights.push(w);
    }
    PathwayAssignment {
        assignment,
        weights,
    }
}

impl PathwayAssignment {
    /// CSV export: `subject_id,pathway_id,pi_0..pi_{p-1}`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let p = self.weights.first().map_or(0, |v| v.len());
        let head: Vec<String> = (0..p).map(|u| format!("pi_{u}")).collect();
        writeln!(w, "subject_id,pathway_id,{}", head.join(","))?;
        for (i, (a, ws)) in self.assignment.iter().zip(&self.weights).enumerate() {
            let ws: Vec<String> = ws.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{},{},{}", i, a, ws.join(","))?;
        }
        Ok(())
    }
}
