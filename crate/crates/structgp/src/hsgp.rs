//! Hilbert-space low-rank features for the squared-exponential components
//! of the structured kernel.
//!
//! The stationary kernel is projected onto the Laplacian eigenbasis of
//! `[-L, L]` with Dirichlet boundary conditions. For the structured kernel
//! the spectral weight of task `v` under source `u` is the Fourier
//! transform of the Gaussian filter,
//! `Hhat_vu(w) = S_vu sqrt(pi l_vu) exp(-l_vu w^2 / 4)`,
//! so that summing `Hhat_vu Hhat_wu phi_j(t) phi_j(t')` over basis
//! functions approximates the closed-form filter correlation of source u.

use nalgebra::DMatrix;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernel::StandardizedGraphParams;
use crate::latent::{LpRow, PathwayParams};

/// Basis configuration: `m` functions per source on `[-L, L]`.
#[derive(Debug, Clone, Copy)]
pub struct HsgpConfig {
    pub m: usize,
    pub l: f64,
    pub boundary_factor: f64,
}

impl HsgpConfig {
    /// `L = boundary_factor * max|t|` over the data (and shifts, in LP mode).
    pub fn from_extent(max_abs_t: f64, m: usize, boundary_factor: f64) -> Self {
        assert!(boundary_factor >= 1.0 && m >= 1);
        Self {
            m,
            l: boundary_factor * max_abs_t.max(f64::MIN_POSITIVE),
            boundary_factor,
        }
    }
}

/// Dirichlet eigenpair on `[-L, L]`: `lambda_j = (pi j / 2L)^2` and
/// `phi_j(x) = sqrt(1/L) sin(pi j (x + L) / 2L)`, `j >= 1`.
pub fn eigenpair(j: usize, l: f64) -> (f64, impl Fn(f64) -> f64) {
    assert!(j >= 1 && l > 0.0);
    let lambda = (PI * j as f64 / (2.0 * l)).powi(2);
    let phi = move |x: f64| (1.0 / l).sqrt() * (PI * j as f64 * (x + l) / (2.0 * l)).sin();
    (lambda, phi)
}

/// Spectral density of the squared-exponential kernel:
/// `S(w) = alpha sqrt(2 pi) l exp(-l^2 w^2 / 2)`.
pub fn se_spectral_density(alpha: f64, ell_se: f64, omega: f64) -> f64 {
    debug_assert!(ell_se > 0.0);
    alpha * (2.0 * PI).sqrt() * ell_se * (-0.5 * ell_se * ell_se * omega * omega).exp()
}

/// Fourier transform of the Gaussian filter `S exp(-t^2/l)` at frequency w.
pub fn filter_fourier(s: f64, ell: f64, omega: f64) -> f64 {
    s * (PI * ell).sqrt() * (-ell * omega * omega / 4.0).exp()
}

/// Metadata of one feature column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureColumn {
    /// latent source (tasks) or (pathway, source) flattened index (LP)
    pub source: usize,
    /// basis index, 1-based
    pub basis: usize,
}

/// Low-rank feature matrix with `K ~= Phi Phi^T`. Columns are grouped by
/// source.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub phi: DMatrix<f64>,
    pub columns: Vec<FeatureColumn>,
}

impl FeatureMatrix {
    /// Debug dump of the dense feature matrix.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let head: Vec<String> = self
            .columns
            .iter()
            .map(|c| format!("u{}_j{}", c.source, c.basis))
            .collect();
        writeln!(w, "{}", head.join(","))?;
        for i in 0..self.phi.nrows() {
            let row: Vec<String> = (0..self.phi.ncols())
                .map(|j| self.phi[(i, j)].to_string())
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Features for the inter-task kernel: the feature of observation
/// `(task v, time t)` under source `u`, basis `j` is
/// `Hhat_vu(sqrt(lambda_j)) phi_j(t)`.
pub fn structured_features(
    params: &StandardizedGraphParams,
    rows: &[(usize, f64)],
    cfg: &HsgpConfig,
) -> Result<FeatureMatrix> {
    let k = params.task_count();
    for &(_, t) in rows {
        if t.abs() >= cfg.l {
            return Err(Error::Numerical(format!(
                "time {t} outside the HSGP domain [-{}, {}]",
                cfg.l, cfg.l
            )));
        }
    }
    let n = rows.len();
    let mut phi = DMatrix::zeros(n, k * cfg.m);
    let mut columns = Vec::with_capacity(k * cfg.m);
    for u in 0..k {
        for j in 1..=cfg.m {
            let col = u * cfg.m + (j - 1);
            columns.push(FeatureColumn { source: u, basis: j });
            let (lambda, basis) = eigenpair(j, cfg.l);
            let omega = lambda.sqrt();
            for (i, &(v, t)) in rows.iter().enumerate() {
                let weight = filter_fourier(params.s_tilde[(v, u)], params.ell(v, u), omega);
                if weight != 0.0 {
                    phi[(i, col)] = weight * basis(t);
                }
            }
        }
    }
    Ok(FeatureMatrix { phi, columns })
}

/// Features for the inter-subject latent-pathway component. The feature of
/// observation `(subject i, task v, time t)` under pathway `u`, source `q`,
/// basis `j` is
/// `sqrt(gamma) pi_iu Ghat_iu(w_j) Hhat_vq(w_j) phi_j(t - tau_iu)`,
/// so that `Phi Phi^T` reproduces the gamma-weighted inter-subject term.
pub fn lp_structured_features(
    graph: &StandardizedGraphParams,
    pw: &PathwayParams,
    rows: &[LpRow],
    cfg: &HsgpConfig,
) -> Result<FeatureMatrix> {
    let k = graph.task_count();
    let p = pw.pathway_count();
    for &(i, _, t) in rows {
        for u in 0..p {
            let shifted = t - pw.tau[(i, u)];
            if shifted.abs() >= cfg.l {
                return Err(Error::Numerical(format!(
                    "shifted time {shifted} outside the HSGP domain"
                )));
            }
        }
    }
    let weights: Vec<Vec<f64>> = (0..pw.subject_count()).map(|i| pw.weights_of(i)).collect();
    let n = rows.len();
    let q_cols = p * k * cfg.m;
    let mut phi = DMatrix::zeros(n, q_cols);
    let mut columns = Vec::with_capacity(q_cols);
    let sqrt_gamma = pw.gamma.sqrt();
    for u in 0..p {
        for q in 0..k {
            for j in 1..=cfg.m {
                let col = (u * k + q) * cfg.m + (j - 1);
                columns.push(FeatureColumn {
                    source: u * k + q,
                    basis: j,
                });
                let (lambda, basis) = eigenpair(j, cfg.l);
                let omega = lambda.sqrt();
                for (x, &(i, v, t)) in rows.iter().enumerate() {
                    let task_w = filter_fourier(graph.s_tilde[(v, q)], graph.ell(v, q), omega);
                    if task_w == 0.0 {
                        continue;
                    }
                    let subj_w =
                        filter_fourier(weights[i][u], pw.ell_sub(i, u), omega);
                    phi[(x, col)] =
                        sqrt_gamma * subj_w * task_w * basis(t - pw.tau[(i, u)]);
                }
            }
        }
    }
    Ok(FeatureMatrix { phi, columns })
}
