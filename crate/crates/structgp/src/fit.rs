//! Fitting pipelines: the independent-task and dense unconstrained
//! baselines, the constrained structure-learning fit with the sparsity
//! grid, and the subject-pathway fit on top of a (frozen or freshly
//! learned) inter-task graph.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, ObservationSet};
use crate::error::{Error, Result};
use crate::grad::{lp_nmll_grad, structgp_nmll_grad, structgp_nmll_value, PathwayLayout, StructGpLayout};
use crate::kernel::GraphParams;
use crate::latent::{LpRow, PathwayParams};
use crate::learn::{
    acyclicity, augmented_lagrangian_fit, lambda_grid_search, smooth_l1, AdamState, GridFit,
    LagrangianConfig, LearnedStructure, PenaltyConfig, SelectionCriterion,
};

/// Which model to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// diagonal-only amplitudes, fixed: every task its own GP
    Independent,
    /// dense amplitudes, no sparsity or acyclicity constraints
    NoStructure,
    /// constrained structure learning with the sparsity grid
    StructGp,
    /// structure learning, then subject pathways on the frozen graph
    LpStructGp,
    /// subject pathways on an externally supplied graph, frozen bitwise
    LpFixed,
}

impl std::fmt::Display for FitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            FitMode::Independent => "independent",
            FitMode::NoStructure => "no-structure",
            FitMode::StructGp => "structgp",
            FitMode::LpStructGp => "lp-structgp",
            FitMode::LpFixed => "lp-fixed",
        };
        f.write_str(name)
    }
}

/// All fitting hyperparameters with their defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSettings {
    pub mode: FitMode,
    /// descending sparsity weights
    pub lambda_grid: Vec<f64>,
    pub beta_l1: f64,
    pub lagrangian: LagrangianConfig,
    /// Adam budget for the unconstrained baselines and the pathway fit
    pub adam_steps: usize,
    pub adam_lr: f64,
    pub learn_noise: bool,
    /// tie all tasks to one noise level instead of one per task
    pub shared_noise: bool,
    pub noise_init: f64,
    pub pathways: usize,
    pub gamma: f64,
    pub batch_subjects: usize,
    /// subjects per stochastic gradient step in the constrained graph fit
    /// (0 = exact full-batch)
    pub graph_batch_subjects: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// 20 log-spaced sparsity weights from 10 down to 1e-3.
pub fn default_lambda_grid() -> Vec<f64> {
    let (hi, lo, n) = (10f64.ln(), 1e-3f64.ln(), 20);
    (0..n)
        .map(|i| (hi + (lo - hi) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            mode: FitMode::StructGp,
            lambda_grid: default_lambda_grid(),
            beta_l1: 100.0,
            lagrangian: LagrangianConfig::default(),
            adam_steps: 300,
            adam_lr: 0.02,
            learn_noise: true,
            shared_noise: false,
            noise_init: 0.1,
            pathways: 2,
            gamma: 0.3,
            batch_subjects: 8,
            graph_batch_subjects: 0,
            epochs: 10,
            seed: 0,
        }
    }
}

/// Everything a fit produces.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub mode: FitMode,
    pub params: GraphParams,
    pub pathways: Option<PathwayParams>,
    pub structure: Option<LearnedStructure>,
    pub nmll: f64,
    /// smooth acyclicity of the fitted amplitudes before thresholding
    pub smooth_h: f64,
}

/// Random initialization: off-diagonal amplitudes ~ Normal(0, 0.1^2),
/// unit diagonal, log-lengthscales ~ Uniform[0, 1].
fn init_graph(k: usize, noise: f64, rng: &mut ChaCha8Rng) -> GraphParams {
    let s = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else {
            0.1 * rng.sample::<f64, _>(StandardNormal)
        }
    });
    let log_l = DMatrix::from_fn(k, k, |_, _| rng.gen_range(0.0..1.0));
    GraphParams {
        s,
        log_l,
        noise: vec![noise; k],
    }
}

/// NMLL (+ optional sparsity penalty) objective over the flat layout. On a
/// numerical failure the value is NaN and the error is kept for reporting.
struct GraphObjective<'a> {
    obs: &'a ObservationSet,
    layout: StructGpLayout,
    fixed_noise: Vec<f64>,
    shared_noise: bool,
    penalty: Option<PenaltyConfig>,
    /// subjects per stochastic evaluation (0 = all); sampled values and
    /// gradients are rescaled to full-data scale
    batch: usize,
    /// keep the diagonal amplitudes fixed at their initial value; the row
    /// scale is unidentifiable after standardization, and anchoring it makes
    /// the off-diagonal penalty and threshold comparable across rows
    pin_diagonal: bool,
    rng: RefCell<ChaCha8Rng>,
    last_error: RefCell<Option<Error>>,
}

impl GraphObjective<'_> {
    fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let params = self.layout.unpack(x, &self.fixed_noise);
        let r = self.obs.subject_count();
        let (result, scale) = if self.batch > 0 && self.batch < r {
            let idx = rand::seq::index::sample(&mut *self.rng.borrow_mut(), r, self.batch);
            let subjects: Vec<usize> = idx.into_iter().collect();
            (
                crate::grad::structgp_nmll_grad_subjects(&params, self.obs, &subjects),
                r as f64 / self.batch as f64,
            )
        } else {
            (structgp_nmll_grad(&params, self.obs), 1.0)
        };
        match result {
            Ok(g) => {
                let mut value = scale * g.nmll;
                let mut grad = self.layout.pack_grad(&g);
                if scale != 1.0 {
                    for gi in grad.iter_mut() {
                        *gi *= scale;
                    }
                }
                if let Some(pen) = &self.penalty {
                    let (pv, pg) = smooth_l1(&params.s, pen);
                    value += pv;
                    self.layout.add_s_grad(&mut grad, &pg);
                }
                if self.pin_diagonal {
                    let k = self.layout.k;
                    for v in 0..k {
                        grad[v * k + v] = 0.0;
                    }
                }
                if self.shared_noise && self.layout.learn_noise {
                    // averaging the noise gradients keeps the (equally
                    // initialized) per-task noises identical under Adam,
                    // which realizes a single shared noise level
                    let k = self.layout.k;
                    let start = 2 * k * k;
                    let mean = grad[start..].iter().sum::<f64>() / k as f64;
                    grad[start..].fill(mean);
                }
                (value, grad)
            }
            Err(e) => {
                *self.last_error.borrow_mut() = Some(e);
                (f64::NAN, vec![0.0; x.len()])
            }
        }
    }

    fn take_error(&self, fallback: &str) -> Error {
        self.last_error
            .borrow_mut()
            .take()
            .unwrap_or_else(|| Error::Numerical(fallback.into()))
    }
}

/// Plain Adam minimization with an optional free-coordinate mask.
fn adam_minimize<F>(
    x0: Vec<f64>,
    steps: usize,
    lr: f64,
    free: Option<&[bool]>,
    mut fg: F,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let mut adam = AdamState::new(x.len(), lr);
    let mut best = (x.clone(), f64::INFINITY);
    for _ in 0..steps {
        let (value, mut grad) = fg(&x);
        if !value.is_finite() {
            return Err(Error::Numerical("objective diverged (non-finite)".into()));
        }
        if value < best.1 {
            best = (x.clone(), value);
        }
        if let Some(mask) = free {
            for (g, &f) in grad.iter_mut().zip(mask) {
                if !f {
                    *g = 0.0;
                }
            }
        }
        adam.step(&mut x, &grad)?;
    }
    let (value, _) = fg(&x);
    if value.is_finite() && value < best.1 {
        best = (x, value);
    }
    Ok(best)
}

fn fit_graph_unconstrained(
    obs: &ObservationSet,
    settings: &FitSettings,
    diagonal_only: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(GraphParams, f64)> {
    let k = obs.task_count();
    let layout = StructGpLayout {
        k,
        learn_noise: settings.learn_noise,
    };
    let mut init = init_graph(k, settings.noise_init, rng);
    if diagonal_only {
        init.s = DMatrix::identity(k, k);
    }
    let objective = GraphObjective {
        obs,
        layout,
        fixed_noise: init.noise.clone(),
        shared_noise: settings.shared_noise,
        penalty: None,
        batch: 0,
        pin_diagonal: false,
        rng: RefCell::new(ChaCha8Rng::seed_from_u64(settings.seed)),
        last_error: RefCell::new(None),
    };
    let free = if diagonal_only {
        // amplitudes stay fixed at the identity; only the diagonal
        // lengthscales (the only ones in use) and the noise move
        let mut mask = vec![false; layout.dim()];
        for v in 0..k {
            mask[k * k + v * k + v] = true; // logL[(v, v)]
        }
        for m in mask.iter_mut().skip(2 * k * k) {
            *m = true;
        }
        Some(mask)
    } else {
        None
    };
    let x0 = layout.pack(&init);
    let (x, nmll) = adam_minimize(
        x0,
        settings.adam_steps,
        settings.adam_lr,
        free.as_deref(),
        |x| objective.eval(x),
    )
    .map_err(|e| match e {
        Error::Numerical(_) => objective.take_error("unconstrained fit diverged"),
        other => other,
    })?;
    Ok((layout.unpack(&x, &init.noise), nmll))
}

/// One constrained fit at a fixed sparsity weight.
fn fit_constrained_at(
    obs: &ObservationSet,
    settings: &FitSettings,
    lambda: f64,
    warm: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<GridFit> {
    let k = obs.task_count();
    let layout = StructGpLayout {
        k,
        learn_noise: settings.learn_noise,
    };
    let init = init_graph(k, settings.noise_init, rng);
    let x0 = match warm {
        Some(w) => w.to_vec(),
        None => layout.pack(&init),
    };
    let objective = GraphObjective {
        obs,
        layout,
        fixed_noise: init.noise.clone(),
        shared_noise: settings.shared_noise,
        penalty: Some(PenaltyConfig {
            lambda,
            beta_l1: settings.beta_l1,
        }),
        batch: settings.graph_batch_subjects,
        pin_diagonal: true,
        rng: RefCell::new(ChaCha8Rng::seed_from_u64(rng.gen())),
        last_error: RefCell::new(None),
    };
    let constraint = |x: &[f64]| {
        let (h, g_s) = acyclicity(&layout.s_matrix(x));
        let mut grad = vec![0.0; layout.dim()];
        layout.add_s_grad(&mut grad, &g_s);
        (h, grad)
    };
    let fitted = augmented_lagrangian_fit(
        x0,
        |x| objective.eval(x),
        constraint,
        &settings.lagrangian,
    )
    .map_err(|e| match e {
        Error::Numerical(_) => objective.take_error("constrained fit diverged"),
        other => other,
    })?;
    let params = layout.unpack(&fitted.params, &init.noise);
    // the reported likelihood excludes the penalty and is evaluated at the
    // hard-thresholded amplitudes after a short refit on that support, so
    // every grid point's AIC compares supports at their own optimum
    let (_, thresholded, _) = crate::learn::hard_threshold(&params.s);
    let mut masked = params.clone();
    masked.s = thresholded;
    let (polished, nmll) = polish_support(obs, &masked, settings, 40, rng.gen())?;
    Ok(GridFit {
        params: fitted.params,
        nmll,
        s: polished.s,
    })
}


/// Masked refit on a fixed support: zero amplitudes stay zero, the diagonal
/// stays anchored, lengthscales stay free, noise is held fixed. Runs
/// (optionally mini-batched) Adam with tail-iterate averaging and returns
/// the refit parameters with their exact NMLL.
fn polish_support(
    obs: &ObservationSet,
    params: &GraphParams,
    settings: &FitSettings,
    steps: usize,
    seed: u64,
) -> Result<(GraphParams, f64)> {
    let k = params.task_count();
    let layout = StructGpLayout {
        k,
        learn_noise: false,
    };
    let objective = GraphObjective {
        obs,
        layout,
        fixed_noise: params.noise.clone(),
        shared_noise: false,
        penalty: None,
        batch: settings.graph_batch_subjects,
        pin_diagonal: true,
        rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        last_error: RefCell::new(None),
    };
    let mut mask = vec![false; layout.dim()];
    for v in 0..k {
        for u in 0..k {
            if v != u && params.s[(v, u)] != 0.0 {
                mask[v * k + u] = true;
            }
            mask[k * k + v * k + u] = true; // logL
        }
    }
    let mut x = layout.pack(params);
    let mut adam = AdamState::new(x.len(), settings.lagrangian.lr);
    let tail = steps - steps / 4;
    let mut avg = vec![0.0; x.len()];
    let mut avg_n = 0usize;
    for step in 0..steps {
        let (value, mut grad) = objective.eval(&x);
        if !value.is_finite() {
            return Err(objective.take_error("support refit diverged"));
        }
        for (g, &free) in grad.iter_mut().zip(&mask) {
            if !free {
                *g = 0.0;
            }
        }
        adam.step(&mut x, &grad)?;
        if step >= tail {
            for (a, t) in avg.iter_mut().zip(&x) {
                *a += t;
            }
            avg_n += 1;
        }
    }
    if avg_n > 0 {
        for (xi, a) in x.iter_mut().zip(&avg) {
            *xi = a / avg_n as f64;
        }
    }
    let refit = layout.unpack(&x, &params.noise);
    let nmll = structgp_nmll_value(&refit, obs)?;
    Ok((refit, nmll))
}

/// Constrained structure learning over the sparsity grid.
fn fit_structgp(
    obs: &ObservationSet,
    settings: &FitSettings,
) -> Result<(GraphParams, LearnedStructure)> {
    let k = obs.task_count();
    let layout = StructGpLayout {
        k,
        learn_noise: settings.learn_noise,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let noise_template = vec![settings.noise_init; k];
    let (structure, best) = lambda_grid_search(
        &settings.lambda_grid,
        |lambda, warm| fit_constrained_at(obs, settings, lambda, warm, &mut rng),
        SelectionCriterion::Aic,
    )?;
    let mut params = layout.unpack(&best.params, &noise_template);
    // apply the selected threshold so downstream predictions use the DAG
    for v in 0..k {
        for u in 0..k {
            params.s[(v, u)] = structure.weights[v][u];
        }
    }
    // re-align the lengthscales with the selected support before the
    // discrete refinement (the unpacked ones belong to the soft fit)
    let (params, _) = polish_support(obs, &params, settings, 40, settings.seed)?;
    refine_structure(obs, params, structure)
}

/// Local discrete refinement of a thresholded structure under the exact
/// AIC: reverse an edge when the reversed model has strictly lower NMLL
/// (and stays acyclic), and drop the weakest edges whose likelihood
/// contribution is below their AIC cost. Both moves are evaluated at the
/// fitted continuous parameters without refitting.
fn refine_structure(
    obs: &ObservationSet,
    mut params: GraphParams,
    mut structure: LearnedStructure,
) -> Result<(GraphParams, LearnedStructure)> {
    let k = params.task_count();
    let nmll_at = |p: &GraphParams| structgp_nmll_value(p, obs);
    let mut current = nmll_at(&params)?;
    for _round in 0..2 {
        let mut changed = false;
        // edge reversals, strongest first
        let mut edges: Vec<(usize, usize, f64)> = (0..k)
            .flat_map(|v| (0..k).map(move |u| (v, u)))
            .filter(|&(v, u)| v != u && params.s[(v, u)] != 0.0)
            .map(|(v, u)| (v, u, params.s[(v, u)].abs()))
            .collect();
        edges.sort_by(|a, b| b.2.total_cmp(&a.2));
        for &(v, u, _) in &edges {
            if params.s[(v, u)] == 0.0 || params.s[(u, v)] != 0.0 {
                continue;
            }
            let mut candidate = params.clone();
            candidate.s[(u, v)] = candidate.s[(v, u)];
            candidate.s[(v, u)] = 0.0;
            candidate.log_l[(u, v)] = candidate.log_l[(v, u)];
            if !crate::learn::Digraph::from_amplitudes(&candidate.s).is_acyclic() {
                continue;
            }
            let trial = nmll_at(&candidate)?;
            if trial < current {
                params = candidate;
                current = trial;
                changed = true;
            }
        }
        // weakest-edge pruning: drop an edge when it buys less than its
        // AIC cost of one unit of log-likelihood
        let mut edges: Vec<(usize, usize, f64)> = (0..k)
            .flat_map(|v| (0..k).map(move |u| (v, u)))
            .filter(|&(v, u)| v != u && params.s[(v, u)] != 0.0)
            .map(|(v, u)| (v, u, params.s[(v, u)].abs()))
            .collect();
        edges.sort_by(|a, b| a.2.total_cmp(&b.2));
        for &(v, u, _) in &edges {
            let mut candidate = params.clone();
            candidate.s[(v, u)] = 0.0;
            let trial = nmll_at(&candidate)?;
            if trial <= current + 1.0 {
                params = candidate;
                current = trial;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let adjacency = crate::learn::Digraph::from_amplitudes(&params.s);
    let edge_count = adjacency.edge_count() as f64;
    structure.topological_order = adjacency
        .topological_order()
        .ok_or_else(|| Error::Numerical("refined structure is not acyclic".into()))?;
    structure.adjacency = adjacency;
    structure.weights = (0..k)
        .map(|v| (0..k).map(|u| params.s[(v, u)]).collect())
        .collect();
    structure.nmll = current;
    structure.aic = 2.0 * edge_count + 2.0 * current;
    Ok((params, structure))
}

fn batch_rows(obs: &ObservationSet, subjects: &[usize]) -> (Vec<LpRow>, DVector<f64>) {
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for &i in subjects {
        for rec in obs.subject_records(i) {
            rows.push((rec.subject, rec.task, rec.time));
            values.push(rec.value);
        }
    }
    (rows, DVector::from_vec(values))
}

/// Fit the subject-pathway parameters by mini-batch Adam on the exact
/// per-batch joint NMLL, with the graph frozen. Returns the parameters and
/// the summed per-batch NMLL at the final parameters (a block
/// pseudo-likelihood; batches within one pass are disjoint).
pub fn fit_pathways(
    obs: &ObservationSet,
    graph: &GraphParams,
    settings: &FitSettings,
) -> Result<(PathwayParams, f64)> {
    let std = graph.standardize()?;
    let r = obs.subject_count();
    let p = settings.pathways;
    let layout = PathwayLayout {
        subjects: r,
        pathways: p,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(1));
    let init = PathwayParams {
        logits: DMatrix::from_fn(r, p, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)),
        log_l_sub: DMatrix::from_fn(r, p, |_, _| rng.gen_range(0.0..1.0)),
        tau: DMatrix::from_fn(r, p, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)),
        gamma: settings.gamma,
    };
    let mut x = layout.pack(&init);
    let mut adam = AdamState::new(layout.dim(), settings.adam_lr);
    for epoch in 0..settings.epochs {
        let batches = make_batches(obs, settings.batch_subjects, settings.seed.wrapping_add(epoch as u64));
        for batch in &batches {
            let (rows, y) = batch_rows(obs, &batch.subject_ids);
            if rows.is_empty() {
                continue;
            }
            let pw = layout.unpack(&x, settings.gamma);
            let g = lp_nmll_grad(&std, &pw, &rows, &y)?;
            adam.step(&mut x, &layout.pack_grad(&g))?;
        }
    }
    let pw = layout.unpack(&x, settings.gamma);
    let mut nmll = 0.0;
    for batch in &make_batches(obs, settings.batch_subjects, settings.seed) {
        let (rows, y) = batch_rows(obs, &batch.subject_ids);
        if rows.is_empty() {
            continue;
        }
        nmll += lp_nmll_grad(&std, &pw, &rows, &y)?.nmll;
    }
    Ok((pw, nmll))
}

/// Run the configured pipeline on one dataset. `frozen_graph` supplies the
/// inter-task parameters for `lp-fixed` and is required there; other modes
/// ignore it.
pub fn fit(
    obs: &ObservationSet,
    settings: &FitSettings,
    frozen_graph: Option<&GraphParams>,
) -> Result<FitResult> {
    if obs.len() == 0 {
        return Err(Error::Data("no observations to fit".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    match settings.mode {
        FitMode::Independent => {
            let (params, nmll) = fit_graph_unconstrained(obs, settings, true, &mut rng)?;
            let smooth_h = acyclicity(&params.s).0;
            Ok(FitResult {
                mode: settings.mode,
                params,
                pathways: None,
                structure: None,
                nmll,
                smooth_h,
            })
        }
        FitMode::NoStructure => {
            let (params, nmll) = fit_graph_unconstrained(obs, settings, false, &mut rng)?;
            let smooth_h = acyclicity(&params.s).0;
            Ok(FitResult {
                mode: settings.mode,
                params,
                pathways: None,
                structure: None,
                nmll,
                smooth_h,
            })
        }
        FitMode::StructGp => {
            let (params, structure) = fit_structgp(obs, settings)?;
            // pre-threshold smoothness is recorded against the unthresholded
            // weights kept in the structure's own diagnostics
            let smooth_h = acyclicity(&params.s).0;
            Ok(FitResult {
                mode: settings.mode,
                nmll: structure.nmll,
                structure: Some(structure),
                params,
                pathways: None,
                smooth_h,
            })
        }
        FitMode::LpStructGp => {
            let (params, structure) = fit_structgp(obs, settings)?;
            let (pathways, nmll) = fit_pathways(obs, &params, settings)?;
            let smooth_h = acyclicity(&params.s).0;
            Ok(FitResult {
                mode: settings.mode,
                structure: Some(structure),
                params,
                pathways: Some(pathways),
                nmll,
                smooth_h,
            })
        }
        FitMode::LpFixed => {
            let graph = frozen_graph
                .ok_or_else(|| Error::Config("lp-fixed requires an input graph bundle".into()))?;
            let (pathways, nmll) = fit_pathways(obs, graph, settings)?;
            let smooth_h = acyclicity(&graph.s).0;
            Ok(FitResult {
                mode: settings.mode,
                params: graph.clone(),
                pathways: Some(pathways),
                structure: None,
                nmll,
                smooth_h,
            })
        }
    }
}
