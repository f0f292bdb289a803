//! Analytic NMLL gradients and flat parameter layouts for the optimizer.
//!
//! Gradients use the reverse sensitivity `W = K^-1 - alpha alpha^T`
//! (`dNMLL/dtheta = 1/2 sum_ab W_ab dK_ab/dtheta`) with closed-form kernel
//! partials, chained through the internal amplitude standardization. The
//! subject-pathway gradient additionally chains through the softmax gating.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::gp::{cholesky_with_jitter, subject_rows};
use crate::kernel::{GraphParams, StandardizedGraphParams};
use crate::latent::{LpRow, PathwayParams};
use crate::par;

/// NMLL value and gradient with respect to the raw inter-task parameters.
#[derive(Debug, Clone)]
pub struct StructGpGrad {
    pub nmll: f64,
    pub s: DMatrix<f64>,
    pub log_l: DMatrix<f64>,
    /// gradient with respect to log noise std, per task
    pub log_noise: Vec<f64>,
}

/// Per-block accumulators in standardized coordinates.
struct BlockGrad {
    nmll: f64,
    s_tilde: DMatrix<f64>,
    log_l: DMatrix<f64>,
    log_noise: Vec<f64>,
}

/// Per-(task pair, source) constants hoisted out of the O(n^2 k) loops.
/// Only the time lag varies inside the loops, so the prefactor and the
/// lengthscale-derivative coefficients are computed once per pair.
struct SrcConst {
    sa: f64,
    sb: f64,
    pref: f64,
    inv_sum: f64,
    /// d ln(rho) / d log(ell_a) = c1a + c2a * dt^2, and likewise for b.
    c1a: f64,
    c2a: f64,
    c1b: f64,
    c2b: f64,
}

fn src_consts(std: &StandardizedGraphParams) -> Vec<SrcConst> {
    let k = std.task_count();
    let mut out = Vec::with_capacity(k * k * k);
    for va in 0..k {
        for vb in 0..k {
            for u in 0..k {
                let la = std.ell(va, u);
                let lb = std.ell(vb, u);
                let sum = la + lb;
                let ratio = if la > lb { la / lb } else { lb / la };
                let pref = if ratio > 1e12 {
                    (0.5 * (PI.ln() + la.ln() + lb.ln() - sum.ln())).exp()
                } else {
                    (PI * la * lb / sum).sqrt()
                };
                let inv_sum = 1.0 / sum;
                out.push(SrcConst {
                    sa: std.s_tilde[(va, u)],
                    sb: std.s_tilde[(vb, u)],
                    pref,
                    inv_sum,
                    c1a: 0.5 - 0.5 * la * inv_sum,
                    c2a: la * inv_sum * inv_sum,
                    c1b: 0.5 - 0.5 * lb * inv_sum,
                    c2b: lb * inv_sum * inv_sum,
                });
            }
        }
    }
    out
}

fn block_grad(
    std: &StandardizedGraphParams,
    consts: &[SrcConst],
    rows: &[(usize, f64)],
    y: &DVector<f64>,
) -> Result<BlockGrad> {
    let k = std.task_count();
    let n = rows.len();

    // Pass 1: assemble the training covariance over the upper triangle and
    // cache the per-source pair terms for reuse in the gradient pass.
    let mut km = DMatrix::zeros(n, n);
    let mut rho_buf = vec![0.0f64; n * (n + 1) / 2 * k];
    let mut idx = 0;
    for a in 0..n {
        let (va, ta) = rows[a];
        for b in a..n {
            let (vb, tb) = rows[b];
            let dt2 = (ta - tb) * (ta - tb);
            let base = (va * k + vb) * k;
            let mut kv = 0.0;
            for (slot, sc) in rho_buf[idx..idx + k].iter_mut().zip(&consts[base..base + k]) {
                let rho = sc.pref * (-dt2 * sc.inv_sum).exp();
                *slot = rho;
                kv += sc.sa * sc.sb * rho;
            }
            idx += k;
            km[(a, b)] = kv;
            km[(b, a)] = kv;
        }
        km[(a, a)] += std.noise[va].powi(2);
    }

    let (chol, _) = cholesky_with_jitter(&km)?;
    let alpha = chol.solve(y);
    let fit = 0.5 * y.dot(&alpha);
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let nmll = fit + 0.5 * logdet + 0.5 * n as f64 * (2.0 * PI).ln();
    let w = chol.inverse() - &alpha * alpha.transpose();

    // Pass 2: accumulate gradients over the same triangle; off-diagonal
    // pairs count twice since the (b, a) term contributes identically.
    let mut g_st = DMatrix::zeros(k, k);
    let mut g_ll = DMatrix::zeros(k, k);
    let mut g_noise = vec![0.0; k];
    let mut idx = 0;
    for a in 0..n {
        let (va, ta) = rows[a];
        g_noise[va] += 0.5 * w[(a, a)] * 2.0 * std.noise[va].powi(2);
        for b in a..n {
            let (vb, tb) = rows[b];
            let dt2 = (ta - tb) * (ta - tb);
            let c = if a == b { 0.5 * w[(a, b)] } else { w[(a, b)] };
            let base = (va * k + vb) * k;
            for (u, (rho, sc)) in rho_buf[idx..idx + k]
                .iter()
                .zip(&consts[base..base + k])
                .enumerate()
            {
                g_st[(va, u)] += c * sc.sb * rho;
                g_st[(vb, u)] += c * sc.sa * rho;
                let p = sc.sa * sc.sb * rho;
                if p != 0.0 {
                    g_ll[(va, u)] += c * p * (sc.c1a + sc.c2a * dt2);
                    g_ll[(vb, u)] += c * p * (sc.c1b + sc.c2b * dt2);
                }
            }
            idx += k;
        }
    }
    Ok(BlockGrad {
        nmll,
        s_tilde: g_st,
        log_l: g_ll,
        log_noise: g_noise,
    })
}

/// Chain a gradient in standardized coordinates back to the raw amplitudes
/// and log-lengthscales: `S~_vu = S_vu / s_v` with
/// `s_v^2 = sum_m S_vm^2 sqrt(pi l_vm / 2)`.
fn chain_standardization(
    raw: &GraphParams,
    std: &StandardizedGraphParams,
    g_st: &DMatrix<f64>,
    g_ll_direct: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = raw.task_count();
    let mut g_s = DMatrix::zeros(k, k);
    let mut g_ll = g_ll_direct.clone();
    for v in 0..k {
        let sv = std.norm[v];
        // row inner product sum_u g_st[(v,u)] S_vu
        let mut dot = 0.0;
        for u in 0..k {
            dot += g_st[(v, u)] * raw.s[(v, u)];
        }
        for m in 0..k {
            let c_vm = (PI * raw.ell(v, m) / 2.0).sqrt();
            g_s[(v, m)] = g_st[(v, m)] / sv - raw.s[(v, m)] * c_vm * dot / sv.powi(3);
            g_ll[(v, m)] -= raw.s[(v, m)].powi(2) * c_vm * dot / (4.0 * sv.powi(3));
        }
    }
    (g_s, g_ll)
}

/// NMLL and gradient of the blockwise objective over all subjects, with
/// respect to the raw parameters (`S`, `logL`, log noise std). Blocks run
/// in parallel.
pub fn structgp_nmll_grad(params: &GraphParams, obs: &ObservationSet) -> Result<StructGpGrad> {
    let all: Vec<usize> = (0..obs.subject_count()).collect();
    structgp_nmll_grad_subjects(params, obs, &all)
}

/// NMLL of the blockwise objective without gradients (one Cholesky per
/// subject, no inverse or pair accumulation) for cheap exact evaluations.
pub fn structgp_nmll_value(params: &GraphParams, obs: &ObservationSet) -> Result<f64> {
    let std = params.standardize()?;
    let results = par::map_indexed(obs.subject_count(), |subject| -> Result<f64> {
        let (rows, y) = subject_rows(obs, subject);
        if rows.is_empty() {
            return Ok(0.0);
        }
        let km = std.assemble_train(&rows);
        let (chol, _) = cholesky_with_jitter(&km).map_err(|e| Error::SubjectBlock {
            subject,
            source: Box::new(e),
        })?;
        let alpha = chol.solve(&y);
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(0.5 * y.dot(&alpha) + 0.5 * logdet + 0.5 * rows.len() as f64 * (2.0 * PI).ln())
    });
    results.into_iter().sum()
}

/// Same objective restricted to a subset of subject blocks, for stochastic
/// mini-batch training. The caller owns any rescaling to full-data scale.
pub fn structgp_nmll_grad_subjects(
    params: &GraphParams,
    obs: &ObservationSet,
    subjects: &[usize],
) -> Result<StructGpGrad> {
    let std = params.standardize()?;
    let k = params.task_count();
    let consts = src_consts(&std);
    let results = par::map_indexed(subjects.len(), |idx| -> Result<Option<BlockGrad>> {
        let subject = subjects[idx];
        let (rows, y) = subject_rows(obs, subject);
        if rows.is_empty() {
            return Ok(None);
        }
        block_grad(&std, &consts, &rows, &y).map(Some).map_err(|e| Error::SubjectBlock {
            subject,
            source: Box::new(e),
        })
    });
    let mut nmll = 0.0;
    let mut g_st = DMatrix::zeros(k, k);
    let mut g_ll = DMatrix::zeros(k, k);
    let mut g_noise = vec![0.0; k];
    for res in results {
        if let Some(b) = res? {
            nmll += b.nmll;
            g_st += b.s_tilde;
            g_ll += b.log_l;
            for (acc, g) in g_noise.iter_mut().zip(b.log_noise) {
                *acc += g;
            }
        }
    }
    let (g_s, g_ll) = chain_standardization(params, &std, &g_st, &g_ll);
    Ok(StructGpGrad {
        nmll,
        s: g_s,
        log_l: g_ll,
        log_noise: g_noise,
    })
}

/// NMLL value and gradient with respect to the subject-pathway parameters
/// (graph parameters held fixed).
#[derive(Debug, Clone)]
pub struct PathwayGrad {
    pub nmll: f64,
    pub logits: DMatrix<f64>,
    pub log_l_sub: DMatrix<f64>,
    pub tau: DMatrix<f64>,
    pub log_noise: Vec<f64>,
}

/// Joint NMLL over one set of subject-aware rows and its gradient with
/// respect to the gating logits, subject-filter log-lengthscales, and time
/// shifts. The rows couple subjects, so this is a single dense solve.
pub fn lp_nmll_grad(
    graph: &StandardizedGraphParams,
    pw: &PathwayParams,
    rows: &[LpRow],
    y: &DVector<f64>,
) -> Result<PathwayGrad> {
    let n = rows.len();
    let k = graph.task_count();
    let p = pw.pathway_count();
    let r = pw.subject_count();
    let km = crate::latent::assemble_train_lp(graph, pw, rows);
    let (chol, _) = cholesky_with_jitter(&km)?;
    let alpha = chol.solve(y);
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let nmll = 0.5 * y.dot(&alpha) + 0.5 * logdet + 0.5 * n as f64 * (2.0 * PI).ln();
    let w = chol.inverse() - &alpha * alpha.transpose();

    let weights: Vec<Vec<f64>> = (0..r).map(|i| pw.weights_of(i)).collect();
    let mut g_pi: DMatrix<f64> = DMatrix::zeros(r, p); // with respect to the softmax outputs
    let mut g_ls = DMatrix::zeros(r, p);
    let mut g_tau = DMatrix::zeros(r, p);
    let mut g_noise = vec![0.0; k];
    let gamma = pw.gamma;
    for a in 0..n {
        let (_, va, _) = rows[a];
        g_noise[va] += 0.5 * w[(a, a)] * 2.0 * graph.noise[va].powi(2);
        for b in 0..n {
            let c = 0.5 * w[(a, b)] * gamma;
            if c == 0.0 {
                continue;
            }
            let (i, v, t) = rows[a];
            let (ip, wt, tp) = rows[b];
            let dt = t - tp;
            for u in 0..p {
                let ls_i = pw.ell_sub(i, u);
                let ls_ip = pw.ell_sub(ip, u);
                let x = pw.tau[(i, u)] - pw.tau[(ip, u)] - dt;
                // per-pathway source sum and its sensitivities
                let mut f = 0.0;
                let mut df_dx = 0.0;
                let mut df_dls_i = 0.0;
                let mut df_dls_ip = 0.0;
                for q in 0..k {
                    let sv = graph.s_tilde[(v, q)];
                    let sw = graph.s_tilde[(wt, q)];
                    if sv == 0.0 || sw == 0.0 {
                        continue;
                    }
                    let lv = graph.ell(v, q);
                    let lw = graph.ell(wt, q);
                    let total = lv + lw + ls_i + ls_ip;
                    let tval = sv
                        * sw
                        * PI.powf(1.5)
                        * (lv * lw * ls_i * ls_ip / total).sqrt()
                        * (-x * x / total).exp();
                    f += tval;
                    df_dx += tval * (-2.0 * x / total);
                    // d ln T / d log ls = 1/2 - ls/(2 total) + ls x^2/total^2
                    df_dls_i += tval * (0.5 - ls_i / (2.0 * total) + ls_i * x * x / (total * total));
                    df_dls_ip +=
                        tval * (0.5 - ls_ip / (2.0 * total) + ls_ip * x * x / (total * total));
                }
                let pi2 = weights[i][u] * weights[ip][u];
                g_pi[(i, u)] += c * weights[ip][u] * f;
                g_pi[(ip, u)] += c * weights[i][u] * f;
                g_tau[(i, u)] += c * pi2 * df_dx;
                g_tau[(ip, u)] -= c * pi2 * df_dx;
                g_ls[(i, u)] += c * pi2 * df_dls_i;
                g_ls[(ip, u)] += c * pi2 * df_dls_ip;
            }
        }
    }
    // softmax Jacobian: dpi_iu/dz_in = pi_iu (delta_un - pi_in)
    let mut g_logits = DMatrix::zeros(r, p);
    for i in 0..r {
        let mut dot = 0.0;
        for u in 0..p {
            dot += g_pi[(i, u)] * weights[i][u];
        }
        for nn in 0..p {
            g_logits[(i, nn)] = weights[i][nn] * (g_pi[(i, nn)] - dot);
        }
    }
    Ok(PathwayGrad {
        nmll,
        logits: g_logits,
        log_l_sub: g_ls,
        tau: g_tau,
        log_noise: g_noise,
    })
}

/// Flat parameter vector layout for the inter-task model:
/// `[S row-major, logL row-major, (log noise std)]`.
#[derive(Debug, Clone, Copy)]
pub struct StructGpLayout {
    pub k: usize,
    pub learn_noise: bool,
}

impl StructGpLayout {
    pub fn dim(&self) -> usize {
        2 * self.k * self.k + if self.learn_noise { self.k } else { 0 }
    }

    pub fn pack(&self, p: &GraphParams) -> Vec<f64> {
        let k = self.k;
        let mut v = Vec::with_capacity(self.dim());
        for i in 0..k {
            for j in 0..k {
                v.push(p.s[(i, j)]);
            }
        }
        for i in 0..k {
            for j in 0..k {
                v.push(p.log_l[(i, j)]);
            }
        }
        if self.learn_noise {
            v.extend(p.noise.iter().map(|s| s.ln()));
        }
        v
    }

    /// Rebuild parameters from a flat vector; `fixed_noise` supplies the
    /// noise stds when they are not learned.
    pub fn unpack(&self, v: &[f64], fixed_noise: &[f64]) -> GraphParams {
        let k = self.k;
        assert_eq!(v.len(), self.dim());
        let s = DMatrix::from_fn(k, k, |i, j| v[i * k + j]);
        let log_l = DMatrix::from_fn(k, k, |i, j| v[k * k + i * k + j]);
        let noise = if self.learn_noise {
            v[2 * k * k..].iter().map(|x| x.exp()).collect()
        } else {
            fixed_noise.to_vec()
        };
        GraphParams { s, log_l, noise }
    }

    pub fn pack_grad(&self, g: &StructGpGrad) -> Vec<f64> {
        let k = self.k;
        let mut v = Vec::with_capacity(self.dim());
        for i in 0..k {
            for j in 0..k {
                v.push(g.s[(i, j)]);
            }
        }
        for i in 0..k {
            for j in 0..k {
                v.push(g.log_l[(i, j)]);
            }
        }
        if self.learn_noise {
            v.extend(&g.log_noise);
        }
        v
    }

    /// View of the amplitude matrix inside a flat vector.
    pub fn s_matrix(&self, v: &[f64]) -> DMatrix<f64> {
        let k = self.k;
        DMatrix::from_fn(k, k, |i, j| v[i * k + j])
    }

    /// Add a gradient with respect to `S` (e.g. the sparsity penalty or the
    /// acyclicity constraint) into a flat gradient vector.
    pub fn add_s_grad(&self, flat: &mut [f64], g_s: &DMatrix<f64>) {
        let k = self.k;
        for i in 0..k {
            for j in 0..k {
                flat[i * k + j] += g_s[(i, j)];
            }
        }
    }
}

/// Flat layout for the subject-pathway parameters:
/// `[logits row-major, logL_sub row-major, tau row-major]`.
#[derive(Debug, Clone, Copy)]
pub struct PathwayLayout {
    pub subjects: usize,
    pub pathways: usize,
}

impl PathwayLayout {
    pub fn dim(&self) -> usize {
        3 * self.subjects * self.pathways
    }

    pub fn pack(&self, pw: &PathwayParams) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for m in [&pw.logits, &pw.log_l_sub, &pw.tau] {
            for i in 0..self.subjects {
                for j in 0..self.pathways {
                    v.push(m[(i, j)]);
                }
            }
        }
        v
    }

    pub fn unpack(&self, v: &[f64], gamma: f64) -> PathwayParams {
        let (r, p) = (self.subjects, self.pathways);
        assert_eq!(v.len(), self.dim());
        let block = |o: usize| DMatrix::from_fn(r, p, |i, j| v[o + i * p + j]);
        PathwayParams {
            logits: block(0),
            log_l_sub: block(r * p),
            tau: block(2 * r * p),
            gamma,
        }
    }

    pub fn pack_grad(&self, g: &PathwayGrad) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for m in [&g.logits, &g.log_l_sub, &g.tau] {
            for i in 0..self.subjects {
                for j in 0..self.pathways {
                    v.push(m[(i, j)]);
                }
            }
        }
        v
    }
}
