//! Constrained structure learning: the smooth acyclicity function, the
//! SmoothL1 sparsity penalty, an Adam inner solver, the augmented
//! Lagrangian outer loop, hard thresholding to an exact DAG, and the
//! sparsity-weight grid search.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boolean digraph over k nodes; `edges[u * k + v]` is the edge `u -> v`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Digraph {
    pub k: usize,
    edges: Vec<bool>,
}

impl Digraph {
    pub fn empty(k: usize) -> Self {
        Self {
            k,
            edges: vec![false; k * k],
        }
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges[from * self.k + to]
    }

    pub fn set_edge(&mut self, from: usize, to: usize, present: bool) {
        self.edges[from * self.k + to] = present;
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.k;
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, &e)| e)
            .map(move |(i, _)| (i / k, i % k))
    }

    /// From an amplitude matrix indexed (child, parent): edge u -> v iff
    /// S[(v, u)] != 0 for v != u.
    pub fn from_amplitudes(s: &DMatrix<f64>) -> Self {
        let k = s.nrows();
        let mut g = Self::empty(k);
        for v in 0..k {
            for u in 0..k {
                if v != u && s[(v, u)] != 0.0 {
                    g.set_edge(u, v, true);
                }
            }
        }
        g
    }

    /// DFS cycle check.
    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }

    /// Kahn's algorithm; `None` when a cycle exists.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let k = self.k;
        let mut indegree = vec![0usize; k];
        for (_, to) in self.edges() {
            indegree[to] += 1;
        }
        let mut queue: Vec<usize> = (0..k).filter(|&v| indegree[v] == 0).collect();
        let mut order = Vec::with_capacity(k);
        while let Some(v) = queue.pop() {
            order.push(v);
            for w in 0..k {
                if self.has_edge(v, w) {
                    indegree[w] -= 1;
                    if indegree[w] == 0 {
                        queue.push(w);
                    }
                }
            }
        }
        (order.len() == k).then_some(order)
    }
}

/// Matrix exponential by scaling-and-squaring with a Taylor series.
pub fn matrix_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    let k = a.nrows();
    let norm = a.iter().map(|x| x.abs()).fold(0.0f64, f64::max) * k as f64;
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(s as i32);
    let mut result = DMatrix::identity(k, k);
    let mut term = DMatrix::identity(k, k);
    for m in 1..=20 {
        term = &term * &scaled / m as f64;
        result += &term;
    }
    for _ in 0..s {
        result = &result * &result;
    }
    result
}

/// Smooth acyclicity function `h(S) = Tr(exp(S o S)) - k` over the
/// off-diagonal entries (the diagonal is zeroed first), plus its gradient
/// `exp(S o S)^T o 2S`.
pub fn acyclicity(s: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let k = s.nrows();
    let mut b = s.clone();
    for i in 0..k {
        b[(i, i)] = 0.0;
    }
    let hadamard = b.component_mul(&b);
    let e = matrix_exp(&hadamard);
    let h = e.trace() - k as f64;
    let mut grad = e.transpose().component_mul(&(2.0 * &b));
    for i in 0..k {
        grad[(i, i)] = 0.0;
    }
    (h, grad)
}

/// Sparsity penalty configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: f64,
    /// smoothness of the SmoothL1 approximation; larger is closer to |.|
    pub beta_l1: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            beta_l1: 100.0,
        }
    }
}

fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

/// SmoothL1 penalty over the off-diagonal entries:
/// `lambda sum (1/beta) [log(1 + e^{beta x}) + log(1 + e^{-beta x})]`.
pub fn smooth_l1(s: &DMatrix<f64>, cfg: &PenaltyConfig) -> (f64, DMatrix<f64>) {
    let k = s.nrows();
    let beta = cfg.beta_l1;
    let mut value = 0.0;
    let mut grad = DMatrix::zeros(k, k);
    for v in 0..k {
        for u in 0..k {
            if v == u {
                continue;
            }
            let x = s[(v, u)];
            value += (softplus(beta * x) + softplus(-beta * x)) / beta;
            grad[(v, u)] = cfg.lambda * (beta * x / 2.0).tanh();
        }
    }
    (cfg.lambda * value, grad)
}

/// Adam optimizer state: zero-initialized moments, bias-corrected updates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam update in place. Errors on a non-finite gradient, naming
    /// the offending coordinate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        for (i, &g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at parameter {i}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Augmented Lagrangian configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LagrangianConfig {
    /// constraint tolerance
    pub epsilon: f64,
    pub rho_max: f64,
    /// Adam steps per inner minimization
    pub inner_steps: usize,
    pub lr: f64,
    pub max_outer: usize,
}

impl Default for LagrangianConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            rho_max: 1e8,
            inner_steps: 300,
            lr: 0.02,
            max_outer: 20,
        }
    }
}

/// Outcome of one augmented Lagrangian run.
#[derive(Debug, Clone)]
pub struct LagrangianFit {
    pub params: Vec<f64>,
    pub alpha: f64,
    pub rho: f64,
    pub constraint: f64,
    pub objective: f64,
    pub outer_iterations: usize,
    pub budget_exhausted: bool,
}

/// Minimize `f` subject to `g = 0` by the augmented Lagrangian method:
/// inner Adam minimization of `f + alpha g + (rho/2) g^2`, rho escalated
/// x10 when the constraint does not decrease to a quarter of its previous
/// value, dual update `alpha += rho g`, stop when `g < epsilon` or
/// `rho >= rho_max`.
///
/// `f` and `g` return (value, gradient).
pub fn augmented_lagrangian_fit<F, G>(
    x0: Vec<f64>,
    mut f: F,
    mut g: G,
    cfg: &LagrangianConfig,
) -> Result<LagrangianFit>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    G: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let dim = x0.len();
    let mut params = x0;
    let mut alpha = 0.0f64;
    let mut rho = 1.0f64;
    let mut g_prev = g(&params).0;
    let mut outer = 0;
    let mut budget_exhausted = false;

    loop {
        outer += 1;
        let mut g_new;
        loop {
            // inner minimization of the augmented Lagrangian at (alpha, rho)
            let lr = if rho >= 1e4 { cfg.lr / 2.0 } else { cfg.lr };
            let mut adam = AdamState::new(dim, lr);
            let mut trial = params.clone();
            // averaging the tail iterates suppresses the stochastic noise
            // floor when the objective is evaluated on mini-batches
            let tail = cfg.inner_steps - cfg.inner_steps / 4;
            let mut avg = vec![0.0; dim];
            let mut avg_n = 0usize;
            for step in 0..cfg.inner_steps {
                let (fv, mut grad) = f(&trial);
                let (gv, ggrad) = g(&trial);
                let scale = alpha + rho * gv;
                if !fv.is_finite() || !gv.is_finite() {
                    return Err(Error::Numerical(
                        "inner solver diverged (non-finite loss)".into(),
                    ));
                }
                for (gi, ci) in grad.iter_mut().zip(ggrad.iter()) {
                    *gi += scale * ci;
                }
                adam.step(&mut trial, &grad)?;
                if step >= tail {
                    for (a, t) in avg.iter_mut().zip(&trial) {
                        *a += t;
                    }
                    avg_n += 1;
                }
            }
            params = if avg_n > 0 {
                avg.iter().map(|a| a / avg_n as f64).collect()
            } else {
                trial
            };
            g_new = g(&params).0;
            if g_new.abs() < 0.25 * g_prev.abs() || rho >= cfg.rho_max {
                break;
            }
            rho *= 10.0;
        }
        alpha += rho * g_new;
        g_prev = g_new;
        if g_new.abs() < cfg.epsilon || rho >= cfg.rho_max {
            break;
        }
        if outer >= cfg.max_outer {
            budget_exhausted = true;
            break;
        }
    }

    let objective = f(&params).0;
    let constraint = g(&params).0;
    Ok(LagrangianFit {
        params,
        alpha,
        rho,
        constraint,
        objective,
        outer_iterations: outer,
        budget_exhausted,
    })
}

/// Hard-thresholded DAG structure plus fit diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnedStructure {
    pub adjacency: Digraph,
    /// thresholded amplitude matrix, row-major k x k, indexed (child, parent)
    pub weights: Vec<Vec<f64>>,
    pub threshold: f64,
    pub topological_order: Vec<usize>,
    pub nmll: f64,
    pub aic: f64,
    /// AIC with the edge count taken before thresholding, for reference
    pub aic_pre_threshold: f64,
    pub lambda: f64,
}

/// Remove the smallest-magnitude off-diagonal entries of `S` until the
/// boolean graph is exactly acyclic. The threshold is exclusive upward:
/// entries with |S| <= t are removed, with t the smallest candidate from
/// the sorted distinct magnitudes (or below all of them when the graph is
/// already acyclic, reported as 0).
pub fn hard_threshold(s: &DMatrix<f64>) -> (Digraph, DMatrix<f64>, f64) {
    let k = s.nrows();
    let mut magnitudes: Vec<f64> = Vec::new();
    for v in 0..k {
        for u in 0..k {
            if v != u && s[(v, u)] != 0.0 {
                magnitudes.push(s[(v, u)].abs());
            }
        }
    }
    magnitudes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    magnitudes.dedup();

    let thresholded = |cut: f64| -> DMatrix<f64> {
        let mut out = s.clone();
        for v in 0..k {
            for u in 0..k {
                if v != u && out[(v, u)].abs() <= cut {
                    out[(v, u)] = 0.0;
                }
            }
        }
        out
    };
    let acyclic_at = |cut: f64| Digraph::from_amplitudes(&thresholded(cut)).is_acyclic();

    // candidate index -1 = remove nothing; index i = remove |S| <= magnitudes[i];
    // acyclicity is monotone in the candidate index, so binary search
    let cut_of = |idx: isize| -> f64 {
        if idx < 0 {
            -1.0
        } else {
            magnitudes[idx as usize]
        }
    };
    let mut lo: isize = -1;
    let mut hi: isize = magnitudes.len() as isize - 1;
    if !acyclic_at(cut_of(lo)) {
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if acyclic_at(cut_of(mid)) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    } else {
        hi = -1;
    }
    let cut = cut_of(hi);
    let weights = thresholded(cut);
    let graph = Digraph::from_amplitudes(&weights);
    (graph, weights, cut.max(0.0))
}

/// One fitted point of the sparsity grid.
#[derive(Debug, Clone)]
pub struct GridFit {
    pub params: Vec<f64>,
    pub nmll: f64,
    pub s: DMatrix<f64>,
}

/// Model selection rule for the sparsity grid.
pub enum SelectionCriterion<'a> {
    Aic,
    /// external validation loss evaluated on the fitted parameters
    Validation(Box<dyn Fn(&GridFit) -> f64 + 'a>),
}

/// Fit at each lambda of a descending grid with warm starts; pick the
/// lambda minimizing the criterion. Returns the selected structure and
/// the fitted parameters behind it.
pub fn lambda_grid_search<F>(
    grid: &[f64],
    mut fit: F,
    criterion: SelectionCriterion,
) -> Result<(LearnedStructure, GridFit)>
where
    F: FnMut(f64, Option<&[f64]>) -> Result<GridFit>,
{
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    let mut best: Option<(f64, LearnedStructure, GridFit)> = None;
    let mut warm: Option<Vec<f64>> = None;
    let mut failures = 0usize;
    for &lambda in grid {
        let outcome = match fit(lambda, warm.as_deref()) {
            Ok(o) => o,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        warm = Some(outcome.params.clone());
        let (adjacency, weights, threshold) = hard_threshold(&outcome.s);
        let edges_post = adjacency.edge_count() as f64;
        let edges_pre = {
            let k = outcome.s.nrows();
            let mut n = 0;
            for v in 0..k {
                for u in 0..k {
                    if v != u && outcome.s[(v, u)] != 0.0 {
                        n += 1;
                    }
                }
            }
            n as f64
        };
        let aic = 2.0 * edges_post + 2.0 * outcome.nmll;
        let aic_pre = 2.0 * edges_pre + 2.0 * outcome.nmll;
        let score = match &criterion {
            SelectionCriterion::Aic => aic,
            SelectionCriterion::Validation(f) => f(&outcome),
        };
        let structure = LearnedStructure {
            topological_order: adjacency.topological_order().expect("thresholded DAG"),
            adjacency,
            weights: (0..weights.nrows())
                .map(|v| (0..weights.ncols()).map(|u| weights[(v, u)]).collect())
                .collect(),
            threshold,
            nmll: outcome.nmll,
            aic,
            aic_pre_threshold: aic_pre,
            lambda,
        };
        if best.as_ref().map_or(true, |(s, _, _)| score < *s) {
            best = Some((score, structure, outcome));
        }
    }
    match best {
        Some((_, structure, outcome)) => Ok((structure, outcome)),
        None => Err(Error::Numerical(format!(
            "all {failures} grid fits failed"
        ))),
    }
}

impl LearnedStructure {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "adjacency": (0..self.adjacency.k).map(|u| {
                (0..self.adjacency.k).map(|v| self.adjacency.has_edge(u, v)).collect::<Vec<_>>()
            }).collect::<Vec<_>>(),
            "weights": self.weights,
            "threshold": self.threshold,
            "topological_order": self.topological_order,
            "nmll": self.nmll,
            "aic": self.aic,
            "aic_pre_threshold": self.aic_pre_threshold,
            "lambda": self.lambda,
        })
    }

    /// Graphviz DOT: positive edges solid, negative dashed.
    pub fn to_dot(&self, task_names: &[String]) -> String {
        let name = |i: usize| -> String {
            task_names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("task_{i}"))
        };
        let mut out = String::from("digraph structure {\n");
        for i in 0..self.adjacency.k {
            out.push_str(&format!("  \"{}\";\n", name(i)));
        }
        for (u, v) in self.adjacency.edges() {
            let w = self.weights[v][u];
            let style = if w >= 0.0 { "solid" } else { "dashed" };
            out.push_str(&format!(
                "  \"{}\" -> \"{}\" [style={}, label=\"{:.4}\"];\n",
                name(u),
                name(v),
                style,
                w
            ));
        }
        out.push_str("}\n");
        out
    }
}
