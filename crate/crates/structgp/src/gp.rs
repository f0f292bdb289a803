//! Exact Gaussian-process objective and prediction: negative marginal log
//! likelihood via Cholesky with adaptive jitter, posterior predictive
//! mean/variance, and per-subject block solves (subjects are independent
//! in the plain inter-task model, so the joint NMLL is a sum of blocks).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernel::StandardizedGraphParams;
use crate::{data::ObservationSet, par};

/// 97.5% standard-normal quantile used for the 95% interval.
pub const Z95: f64 = 1.959964;

/// Posterior predictive summary per query point.
#[derive(Debug, Clone)]
pub struct PosteriorForecast {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
}

/// Fit diagnostics for a (blockwise) NMLL evaluation.
#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    pub nmll: f64,
    pub per_subject: Vec<f64>,
    pub jitter: f64,
}

/// Cholesky with jitter escalation 0, 1e-8, 1e-7, ..., 1e-4. Returns the
/// factor and the jitter that succeeded; reports the smallest eigenvalue
/// estimate on total failure.
pub fn cholesky_with_jitter(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    if let Some(chol) = k.clone().cholesky() {
        return Ok((chol, 0.0));
    }
    let mut jitter = 1e-8;
    while jitter <= 1e-4 {
        let jittered = k + DMatrix::identity(n, n) * jitter;
        if let Some(chol) = jittered.cholesky() {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    let min_eig = k
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Err(Error::CholeskyFailure {
        max_jitter: 1e-4,
        min_eig,
    })
}

fn logdet_from_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Negative marginal log likelihood
/// `1/2 y^T K^-1 y + 1/2 log|K| + n/2 log 2pi` for a training covariance
/// `k_train` that already includes the noise diagonal.
pub fn nmll(k_train: &DMatrix<f64>, y: &DVector<f64>) -> Result<(f64, f64)> {
    let n = y.len();
    let (chol, jitter) = cholesky_with_jitter(k_train)?;
    let alpha = chol.solve(y);
    let fit = 0.5 * y.dot(&alpha);
    let complexity = 0.5 * logdet_from_chol(&chol);
    let constant = 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok((fit + complexity + constant, jitter))
}

/// Posterior predictive mean and marginal variances.
///
/// `k_train` includes the noise diagonal; `k_cross` is train x query;
/// `prior_var` are the prior variances at the query points (no noise);
/// `query_noise_var` is added to the predictive variance when observation
/// -level intervals are requested.
pub fn posterior_predict(
    k_train: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    prior_var: &[f64],
    y: &DVector<f64>,
    query_noise_var: &[f64],
) -> Result<PosteriorForecast> {
    let (chol, _) = cholesky_with_jitter(k_train)?;
    let alpha = chol.solve(y);
    let mean_vec = k_cross.transpose() * &alpha;
    let solved = chol.solve(k_cross);
    let m = k_cross.ncols();
    let mut mean = Vec::with_capacity(m);
    let mut variance = Vec::with_capacity(m);
    let mut lo95 = Vec::with_capacity(m);
    let mut hi95 = Vec::with_capacity(m);
    for q in 0..m {
        let reduction = k_cross.column(q).dot(&solved.column(q));
        let var = (prior_var[q] - reduction).max(0.0) + query_noise_var[q];
        let sd = var.sqrt();
        mean.push(mean_vec[q]);
        variance.push(var);
        lo95.push(mean_vec[q] - Z95 * sd);
        hi95.push(mean_vec[q] + Z95 * sd);
    }
    Ok(PosteriorForecast {
        mean,
        variance,
        lo95,
        hi95,
    })
}

/// Full posterior covariance `K** - K*^T (K + s^2 I)^-1 K*`. Only needed
/// when joint draws are required; forecasting uses the diagonal path above.
pub fn posterior_full_cov(
    k_train: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    k_query: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (chol, _) = cholesky_with_jitter(k_train)?;
    let solved = chol.solve(k_cross);
    Ok(k_query - k_cross.transpose() * solved)
}

/// Rows and values of one subject, in canonical order.
pub fn subject_rows(obs: &ObservationSet, subject: usize) -> (Vec<(usize, f64)>, DVector<f64>) {
    let recs = obs.subject_records(subject);
    let rows: Vec<(usize, f64)> = recs.iter().map(|r| (r.task, r.time)).collect();
    let y = DVector::from_iterator(recs.len(), recs.iter().map(|r| r.value));
    (rows, y)
}

/// Total NMLL as the sum of independent per-subject blocks (valid when
/// subjects are uncoupled). Blocks solve in parallel.
pub fn blockwise_nmll(
    params: &StandardizedGraphParams,
    obs: &ObservationSet,
) -> Result<FitDiagnostics> {
    let results = par::map_indexed(obs.subject_count(), |subject| -> Result<(f64, f64)> {
        let (rows, y) = subject_rows(obs, subject);
        if rows.is_empty() {
            return Ok((0.0, 0.0));
        }
        let k = params.assemble_train(&rows);
        nmll(&k, &y).map_err(|e| Error::SubjectBlock {
            subject,
            source: Box::new(e),
        })
    });
    let mut per_subject = Vec::with_capacity(results.len());
    let mut max_jitter: f64 = 0.0;
    for res in results {
        let (v, jitter) = res?;
        per_subject.push(v);
        max_jitter = max_jitter.max(jitter);
    }
    Ok(FitDiagnostics {
        nmll: per_subject.iter().sum(),
        per_subject,
        jitter: max_jitter,
    })
}
