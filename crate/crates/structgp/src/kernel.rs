//! Inter-task covariance built from Gaussian convolution filters.
//!
//! Task `v` is driven by latent white-noise sources through filters
//! `H_vu(t) = S_vu exp(-t^2 / l_vu)`. The cross-covariance between two
//! tasks is the sum over shared sources of the closed-form correlation of
//! the corresponding filters. Amplitudes are internally standardized so
//! every task has unit marginal prior variance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Raw kernel parameters: amplitude matrix `S` (diagonal included, the
/// identity self-connections are absorbed), log-lengthscales, and per-task
/// observation noise standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphParams {
    /// k x k amplitudes; entry (v, u) is the strength of source u driving task v.
    pub s: DMatrix<f64>,
    /// k x k log-lengthscales; l_vu = exp(log_l[(v, u)]).
    pub log_l: DMatrix<f64>,
    /// per-task noise std, length k
    pub noise: Vec<f64>,
}

/// Parameters after internal standardization: every task has unit marginal
/// prior variance.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedGraphParams {
    pub s_tilde: DMatrix<f64>,
    pub log_l: DMatrix<f64>,
    /// per-task normalization factors s_v
    pub norm: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Gaussian filter value `S_vu * exp(-t^2 / l_vu)`.
pub fn filter_value(s_vu: f64, ell_vu: f64, t: f64) -> f64 {
    debug_assert!(ell_vu > 0.0);
    s_vu * (-t * t / ell_vu).exp()
}

/// Closed-form filter correlation
/// `S_vu S_wu sqrt(pi l_vu l_wu / (l_vu + l_wu)) exp(-dt^2 / (l_vu + l_wu))`.
pub fn pair_term(s_vu: f64, ell_vu: f64, s_wu: f64, ell_wu: f64, dt: f64) -> f64 {
    debug_assert!(ell_vu > 0.0 && ell_wu > 0.0);
    let sum = ell_vu + ell_wu;
    // log-factored prefactor when lengthscales differ by many orders of
    // magnitude; the direct product can overflow before the division
    let ratio = if ell_vu > ell_wu {
        ell_vu / ell_wu
    } else {
        ell_wu / ell_vu
    };
    let pref = if ratio > 1e12 {
        (0.5 * (PI.ln() + ell_vu.ln() + ell_wu.ln() - sum.ln())).exp()
    } else {
        (PI * ell_vu * ell_wu / sum).sqrt()
    };
    s_vu * s_wu * pref * (-dt * dt / sum).exp()
}

impl GraphParams {
    pub fn task_count(&self) -> usize {
        self.s.nrows()
    }

    /// Zero amplitudes, unit diagonal, log-lengthscales 0, shared noise.
    pub fn identity(k: usize, noise: f64) -> Self {
        Self {
            s: DMatrix::identity(k, k),
            log_l: DMatrix::zeros(k, k),
            noise: vec![noise; k],
        }
    }

    pub fn ell(&self, v: usize, u: usize) -> f64 {
        self.log_l[(v, u)].exp()
    }

    /// Rescale each row of `S` so the marginal prior variance of every task
    /// equals one. Errors on a row with no nonzero amplitude.
    pub fn standardize(&self) -> Result<StandardizedGraphParams> {
        let k = self.task_count();
        let mut norm = Vec::with_capacity(k);
        let mut s_tilde = self.s.clone();
        for v in 0..k {
            let mut s2 = 0.0;
            for u in 0..k {
                s2 += self.s[(v, u)].powi(2) * (PI * self.ell(v, u) / 2.0).sqrt();
            }
            if s2 <= 0.0 {
                return Err(Error::Numerical(format!(
                    "task {v} has an all-zero amplitude row; cannot standardize"
                )));
            }
            let sv = s2.sqrt();
            for u in 0..k {
                s_tilde[(v, u)] /= sv;
            }
            norm.push(sv);
        }
        Ok(StandardizedGraphParams {
            s_tilde,
            log_l: self.log_l.clone(),
            norm,
            noise: self.noise.clone(),
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(GraphParamsJson::from(self)).unwrap()
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let j: GraphParamsJson = serde_json::from_value(v.clone())?;
        j.try_into()
    }
}

/// JSON wire format: row-major k x k matrices.
#[derive(Serialize, Deserialize)]
struct GraphParamsJson {
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
    #[serde(rename = "logL")]
    log_l: Vec<Vec<f64>>,
    noise: Vec<f64>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let k = rows.len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::Data("non-square matrix in JSON".into()));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

impl From<&GraphParams> for GraphParamsJson {
    fn from(p: &GraphParams) -> Self {
        Self {
            s: rows(&p.s),
            log_l: rows(&p.log_l),
            noise: p.noise.clone(),
        }
    }
}

impl TryFrom<GraphParamsJson> for GraphParams {
    type Error = Error;
    fn try_from(j: GraphParamsJson) -> Result<Self> {
        Ok(Self {
            s: from_rows(&j.s)?,
            log_l: from_rows(&j.log_l)?,
            noise: j.noise,
        })
    }
}

impl StandardizedGraphParams {
    pub fn task_count(&self) -> usize {
        self.s_tilde.nrows()
    }

    pub fn ell(&self, v: usize, u: usize) -> f64 {
        self.log_l[(v, u)].exp()
    }

    /// Cross-covariance between tasks `v` and `w` at lag `dt`, summed over
    /// all sources (soft zeros carry gradient during learning).
    pub fn cross_cov(&self, v: usize, w: usize, dt: f64) -> f64 {
        let k = self.task_count();
        let mut acc = 0.0;
        for u in 0..k {
            let sv = self.s_tilde[(v, u)];
            let sw = self.s_tilde[(w, u)];
            if sv == 0.0 || sw == 0.0 {
                continue;
            }
            acc += pair_term(sv, self.ell(v, u), sw, self.ell(w, u), dt);
        }
        acc
    }

    /// Cross-covariance matrix between two row sets of `(task, time)`
    /// pairs, without the noise diagonal.
    pub fn assemble_cross(&self, a: &[(usize, f64)], b: &[(usize, f64)]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| {
            self.cross_cov(a[i].0, b[j].0, a[i].1 - b[j].1)
        })
    }

    /// Training covariance over one row set: symmetric, with the per-task
    /// noise variance added on the diagonal.
    pub fn assemble_train(&self, a: &[(usize, f64)]) -> DMatrix<f64> {
        let n = a.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.cross_cov(a[i].0, a[j].0, a[i].1 - a[j].1);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
            m[(i, i)] += self.noise[a[i].0].powi(2);
        }
        m
    }
}
