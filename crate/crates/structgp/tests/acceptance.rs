//! End-to-end acceptance checks, one test per criterion. Each test prints
//! a single pass/fail line (visible with `--nocapture`, or on failure).

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use structgp::data::{ObservationSet, Record};
use structgp::fit::{self, FitMode, FitSettings};
use structgp::gp;
use structgp::grad::{lp_nmll_grad, structgp_nmll_grad};
use structgp::hsgp::{structured_features, HsgpConfig};
use structgp::kernel::{pair_term, GraphParams};
use structgp::latent::{self, LpRow, PathwayParams};
use structgp::learn::{acyclicity, Digraph, LagrangianConfig};
use structgp::online::{AccumulatorState, BatchBlocks, Block};
use structgp::sim::{self, SimConfig};

fn report(criterion: usize, what: &str, ok: bool) {
    let verdict = if ok { "pass" } else { "fail" };
    println!("criterion {criterion} ({what}): {verdict}");
    assert!(ok, "criterion {criterion} ({what}) failed");
}

fn random_params(k: usize, rng: &mut ChaCha8Rng) -> GraphParams {
    GraphParams {
        s: DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                1.0
            } else {
                rng.gen_range(-1.0..1.0)
            }
        }),
        log_l: DMatrix::from_fn(k, k, |_, _| rng.gen_range(0.0..1.0)),
        noise: (0..k).map(|_| rng.gen_range(0.05..0.3)).collect(),
    }
}

// --- criterion 1: kernel closed form vs adaptive quadrature ------------

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        eps: f64,
        depth: usize,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, eps / 2.0, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, eps / 2.0, depth - 1)
        }
    }
    let (fa, fb) = (f(a), f(b));
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, eps, 40)
}

#[test]
fn criterion_01_pair_term_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let s_vu = sign(&mut rng) * rng.gen_range(0.3..2.0_f64);
        let s_wu = sign(&mut rng) * rng.gen_range(0.3..2.0_f64);
        let l_vu = rng.gen_range(0.5..3.0_f64);
        let l_wu = rng.gen_range(0.5..3.0_f64);
        let dt = rng.gen_range(-2.5..2.5_f64);
        // correlation of the two filters: integral over the shared source
        let integrand = move |u: f64| -> f64 {
            s_vu * (-(dt - u).powi(2) / l_vu).exp() * s_wu * (-u * u / l_wu).exp()
        };
        let half_width = 12.0 * l_vu.max(l_wu).sqrt() + dt.abs();
        let oracle = adaptive_simpson(&integrand, -half_width, half_width, 1e-13);
        let closed = pair_term(s_vu, l_vu, s_wu, l_wu, dt);
        let rel = (closed - oracle).abs() / oracle.abs().max(1e-12);
        worst = worst.max(rel);
    }
    report(1, "closed-form kernel vs quadrature", worst < 1e-8);
}

// --- criterion 2: standardization -------------------------------------

#[test]
fn criterion_02_standardization_unit_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let k = 4;
    let mut analytic_ok = true;
    for _ in 0..20 {
        let std = random_params(k, &mut rng).standardize().unwrap();
        for v in 0..k {
            if (std.cross_cov(v, v, 0.0) - 1.0).abs() > 1e-9 {
                analytic_ok = false;
            }
        }
    }
    // Monte-Carlo: draw 10^4 joint samples of all tasks at one time point
    let std = random_params(k, &mut rng).standardize().unwrap();
    let rows: Vec<(usize, f64)> = (0..k).map(|v| (v, 3.0)).collect();
    let cov = DMatrix::from_fn(k, k, |i, j| std.cross_cov(rows[i].0, rows[j].0, 0.0));
    let chol = cov.cholesky().unwrap();
    let n = 10_000;
    let mut sums = vec![0.0; k];
    let mut sq = vec![0.0; k];
    for _ in 0..n {
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let y = chol.l() * z;
        for v in 0..k {
            sums[v] += y[v];
            sq[v] += y[v] * y[v];
        }
    }
    let mc_ok = (0..k).all(|v| {
        let mean = sums[v] / n as f64;
        let var = sq[v] / n as f64 - mean * mean;
        (0.9..=1.1).contains(&var)
    });
    report(2, "unit marginal variance after standardization", analytic_ok && mc_ok);
}

// --- criterion 3: acyclicity function ----------------------------------

#[test]
fn criterion_03_acyclicity_vs_boolean_and_power_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let k = 6;
    let mut agree = true;
    for _ in 0..100 {
        let s = DMatrix::from_fn(k, k, |i, j| {
            if i != j && rng.gen_bool(0.25) {
                rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
            } else {
                0.0
            }
        });
        let (h, _) = acyclicity(&s);
        let acyclic_boolean = Digraph::from_amplitudes(&s).is_acyclic();
        if acyclic_boolean != (h.abs() < 1e-9) {
            agree = false;
        }
    }
    // unit-weight 3-cycle: the cycle adjacency B satisfies tr(B^m) = 3
    // when 3 | m, so tr(exp(B)) - 3 = 3 * sum_{m >= 1} 1 / (3m)!
    let mut oracle = 0.0;
    let mut factorial = 1.0f64;
    for m in 1..=30 {
        factorial *= ((3 * m - 2) * (3 * m - 1) * (3 * m)) as f64;
        oracle += 3.0 / factorial;
    }
    let cycle = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let (h3, _) = acyclicity(&cycle);
    report(
        3,
        "acyclicity vs boolean detection and power series",
        agree && (h3 - oracle).abs() < 1e-10,
    );
}

// --- criterion 4: Woodbury exactness -----------------------------------

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * (0.5 + rng.gen_range(0.0..0.5))
}

/// Random low-rank + block-diagonal system plus its dense assembly.
fn random_system(
    rng: &mut ChaCha8Rng,
    q: usize,
    block_sizes: &[usize],
) -> (Vec<Block>, DMatrix<f64>, DVector<f64>) {
    let n: usize = block_sizes.iter().sum();
    let mut blocks = Vec::new();
    let mut dense = DMatrix::zeros(n, n);
    let mut y = DVector::zeros(n);
    let mut offset = 0;
    let mut phis = Vec::new();
    for &size in block_sizes {
        let v = DVector::from_fn(size, |_, _| rng.gen_range(-1.0..1.0));
        let phi = DMatrix::from_fn(size, q, |_, _| rng.gen_range(-0.5..0.5));
        let m = random_spd(size, rng);
        dense.view_mut((offset, offset), (size, size)).copy_from(&m);
        y.rows_mut(offset, size).copy_from(&v);
        phis.push((offset, phi.clone()));
        blocks.push(Block { v, phi, m });
        offset += size;
    }
    for (oa, pa) in &phis {
        for (ob, pb) in &phis {
            let cross = pa * pb.transpose();
            let mut view = dense.view_mut((*oa, *ob), (pa.nrows(), pb.nrows()));
            view += cross;
        }
    }
    (blocks, dense, y)
}

#[test]
fn criterion_04_woodbury_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut ok = true;
    for _ in 0..50 {
        let q = rng.gen_range(2..=16);
        let n_blocks = rng.gen_range(2..=5);
        let block_sizes: Vec<usize> = (0..n_blocks).map(|_| rng.gen_range(5..=40)).collect();
        let (blocks, dense, y) = random_system(&mut rng, q, &block_sizes);

        let mut state = AccumulatorState::new(q, 1.0);
        let solution =
            structgp::online::update_and_solve(&mut state, &BatchBlocks { blocks }).unwrap();

        let chol = dense.clone().cholesky().unwrap();
        let x_dense = chol.solve(&y);
        let logdet_dense: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();

        let mut offset = 0;
        for x_block in &solution.x {
            for (i, &xi) in x_block.iter().enumerate() {
                if (xi - x_dense[offset + i]).abs() > 1e-8 * x_dense[offset + i].abs().max(1.0) {
                    ok = false;
                }
            }
            offset += x_block.len();
        }
        if (solution.delta_logdet - logdet_dense).abs() > 1e-8 * logdet_dense.abs().max(1.0) {
            ok = false;
        }
    }
    report(4, "streaming Woodbury vs dense solves", ok);
}

// --- criterion 5: conditional NMLL telescoping -------------------------

#[test]
fn criterion_05_conditional_nmll_telescopes() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut ok = true;
    for splits in 2..=5 {
        let q = 6;
        let block_sizes: Vec<usize> = (0..splits * 2).map(|_| rng.gen_range(4..=15)).collect();
        let (blocks, dense, y) = random_system(&mut rng, q, &block_sizes);
        let (dense_nmll, _) = gp::nmll(&dense, &y).unwrap();

        let mut state = AccumulatorState::new(q, 1.0);
        let mut total = 0.0;
        for chunk in blocks.chunks(blocks.len().div_ceil(splits)) {
            let solution = structgp::online::update_and_solve(
                &mut state,
                &BatchBlocks { blocks: chunk.to_vec() },
            )
            .unwrap();
            total += structgp::online::conditional_nmll(&solution);
        }
        if (total - dense_nmll).abs() > 1e-8 * dense_nmll.abs().max(1.0) {
            ok = false;
        }
    }
    report(5, "batch NMLL terms telescope to the dense NMLL", ok);
}

// --- criterion 6: HSGP fidelity -----------------------------------------

#[test]
fn criterion_06_hsgp_low_rank_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let std = random_params(3, &mut rng).standardize().unwrap();
        let rows: Vec<(usize, f64)> = (0..120)
            .map(|_| (rng.gen_range(0..3), rng.gen_range(-4.0..4.0)))
            .collect();
        let cfg = HsgpConfig::from_extent(4.0, 256, 4.0);
        let features = structured_features(&std, &rows, &cfg).unwrap();
        let approx = &features.phi * features.phi.transpose();
        let exact = std.assemble_cross(&rows, &rows);
        let scale = exact.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        for (a, e) in approx.iter().zip(exact.iter()) {
            worst = worst.max((a - e).abs() / scale);
        }
    }
    report(6, "HSGP feature product vs exact kernel", worst <= 1e-3);
}

// --- criterion 7: gradient checks ----------------------------------------

fn fd_ok(analytic: f64, plus: f64, minus: f64, h: f64) -> bool {
    let fd = (plus - minus) / (2.0 * h);
    let denom = fd.abs().max(analytic.abs()).max(1e-6);
    (analytic - fd).abs() / denom < 1e-4
}

#[test]
fn criterion_07_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let k = 3;
    let params = random_params(k, &mut rng);
    let mut records = Vec::new();
    for subject in 0..2 {
        for _ in 0..12 {
            records.push(Record {
                subject,
                task: rng.gen_range(0..k),
                time: rng.gen_range(0.0..8.0),
                value: rng.gen_range(-1.5..1.5),
            });
        }
    }
    let obs = ObservationSet::new(records, k, 2).unwrap();
    let g = structgp_nmll_grad(&params, &obs).unwrap();
    let eval = |p: &GraphParams| structgp_nmll_grad(p, &obs).unwrap().nmll;
    let mut ok = true;
    for v in 0..k {
        for u in 0..k {
            let h = 1e-5 * params.s[(v, u)].abs().max(1.0);
            let (mut plus, mut minus) = (params.clone(), params.clone());
            plus.s[(v, u)] += h;
            minus.s[(v, u)] -= h;
            ok &= fd_ok(g.s[(v, u)], eval(&plus), eval(&minus), h);

            let h = 1e-5 * params.log_l[(v, u)].abs().max(1.0);
            let (mut plus, mut minus) = (params.clone(), params.clone());
            plus.log_l[(v, u)] += h;
            minus.log_l[(v, u)] -= h;
            ok &= fd_ok(g.log_l[(v, u)], eval(&plus), eval(&minus), h);
        }
        let h = 1e-5;
        let (mut plus, mut minus) = (params.clone(), params.clone());
        plus.noise[v] = (plus.noise[v].ln() + h).exp();
        minus.noise[v] = (minus.noise[v].ln() - h).exp();
        ok &= fd_ok(g.log_noise[v], eval(&plus), eval(&minus), h);
    }

    // latent-pathway groups: logits (S_sub), logL_sub, tau
    let graph = random_params(k, &mut rng).standardize().unwrap();
    let p = 2;
    let subjects = 2;
    let pw = PathwayParams {
        logits: DMatrix::from_fn(subjects, p, |_, _| rng.gen_range(-1.0..1.0)),
        log_l_sub: DMatrix::from_fn(subjects, p, |_, _| rng.gen_range(0.0..1.0)),
        tau: DMatrix::from_fn(subjects, p, |_, _| rng.gen_range(-0.5..0.5)),
        gamma: 0.3,
    };
    let rows: Vec<LpRow> = (0..subjects)
        .flat_map(|i| {
            (0..8)
                .map(|_| (i, rng.gen_range(0..k), rng.gen_range(0.0..6.0)))
                .collect::<Vec<_>>()
        })
        .collect();
    let y = DVector::from_fn(rows.len(), |_, _| rng.gen_range(-1.5..1.5));
    let lp_g = lp_nmll_grad(&graph, &pw, &rows, &y).unwrap();
    let lp_eval = |pw: &PathwayParams| {
        let km = latent::assemble_train_lp(&graph, pw, &rows);
        gp::nmll(&km, &y).unwrap().0
    };
    for i in 0..subjects {
        for u in 0..p {
            for (field, analytic) in [
                (0usize, lp_g.logits[(i, u)]),
                (1, lp_g.log_l_sub[(i, u)]),
                (2, lp_g.tau[(i, u)]),
            ] {
                let h = 1e-5;
                let (mut plus, mut minus) = (pw.clone(), pw.clone());
                let bump = |target: &mut PathwayParams, delta: f64| match field {
                    0 => target.logits[(i, u)] += delta,
                    1 => target.log_l_sub[(i, u)] += delta,
                    _ => target.tau[(i, u)] += delta,
                };
                bump(&mut plus, h);
                bump(&mut minus, -h);
                ok &= fd_ok(analytic, lp_eval(&plus), lp_eval(&minus), h);
            }
        }
    }
    report(7, "analytic gradients vs finite differences", ok);
}

// --- criteria 8 and 9: recovery at desk scale ----------------------------

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fit one repetition and score the learned graph / pathway assignment.
fn score(
    truth: &sim::GroundTruth,
    obs: &ObservationSet,
    settings: &FitSettings,
) -> structgp::Result<sim::RepMetrics> {
    let result = fit::fit(obs, settings, None)?;
    let learned = match &result.structure {
        Some(s) => s.adjacency.clone(),
        None => Digraph::from_amplitudes(&result.params.s),
    };
    let (ari, nmi) = match &result.pathways {
        Some(pw) if !truth.assignment.is_empty() => {
            let assignment = latent::assign_pathways(pw).assignment;
            (
                Some(structgp::metrics::ari(&assignment, &truth.assignment)),
                Some(structgp::metrics::nmi(&assignment, &truth.assignment)),
            )
        }
        _ => (None, None),
    };
    Ok(sim::RepMetrics {
        shd: structgp::metrics::shd(&learned, &truth.adjacency) as f64,
        f1: structgp::metrics::edge_f1(&learned, &truth.adjacency),
        ari,
        nmi,
    })
}

#[test]
fn criterion_08_structure_recovery() {
    let cfg = SimConfig {
        k: 5,
        subjects: 200,
        obs_per_task: 25,
        mean_degree: 2.0,
        noise_var: 1e-2,
        seed: 808,
        ..Default::default()
    };
    let settings = FitSettings {
        mode: FitMode::StructGp,
        // two-point annealing grid: the strong weight does the sparsification
        // and warm-starts the weaker one; AIC picks between them
        lambda_grid: vec![10.0, 1.0],
        lagrangian: LagrangianConfig {
            inner_steps: 100,
            max_outer: 5,
            lr: 0.05,
            ..Default::default()
        },
        adam_steps: 100,
        adam_lr: 0.05,
        learn_noise: false,
        noise_init: 0.1,
        graph_batch_subjects: 50,
        seed: 11,
        ..Default::default()
    };
    let report_out = sim::recovery_experiment(&cfg, 10, |truth, obs| score(truth, obs, &settings));
    let done: Vec<&sim::RepMetrics> = report_out
        .outcomes
        .iter()
        .filter_map(|o| o.as_ref().ok())
        .collect();
    let median_shd = median(done.iter().map(|m| m.shd).collect());
    let median_f1 = median(done.iter().map(|m| m.f1).collect());
    println!(
        "  structure recovery: {} / 10 repetitions, median SHD {median_shd}, median F1 {median_f1:.3}",
        done.len()
    );
    report(
        8,
        "graph recovery (median SHD <= 1, F1 >= 0.8)",
        done.len() == 10 && median_shd <= 1.0 && median_f1 >= 0.8,
    );
}

#[test]
fn criterion_09_pathway_recovery() {
    let cfg = SimConfig {
        k: 3,
        subjects: 200,
        obs_per_task: 15,
        mean_degree: 1.0,
        noise_var: 1e-2,
        pathways: 2,
        latent: true,
        latent_weight: 0.3,
        seed: 909,
        ..Default::default()
    };
    let settings = FitSettings {
        mode: FitMode::LpStructGp,
        lambda_grid: vec![0.3, 0.05],
        lagrangian: LagrangianConfig {
            inner_steps: 60,
            max_outer: 6,
            ..Default::default()
        },
        adam_steps: 100,
        adam_lr: 0.1,
        learn_noise: false,
        noise_init: 0.1,
        pathways: 2,
        gamma: 0.3,
        batch_subjects: 12,
        epochs: 8,
        seed: 12,
        ..Default::default()
    };
    let report_out = sim::recovery_experiment(&cfg, 10, |truth, obs| score(truth, obs, &settings));
    let done: Vec<&sim::RepMetrics> = report_out
        .outcomes
        .iter()
        .filter_map(|o| o.as_ref().ok())
        .collect();
    let median_ari = median(done.iter().filter_map(|m| m.ari).collect());
    let median_nmi = median(done.iter().filter_map(|m| m.nmi).collect());
    println!(
        "  pathway recovery: {} / 10 repetitions, median ARI {median_ari:.3}, median NMI {median_nmi:.3}",
        done.len()
    );
    report(
        9,
        "pathway recovery (median ARI >= 0.8, NMI >= 0.7)",
        done.len() == 10 && median_ari >= 0.8 && median_nmi >= 0.7,
    );
}

// --- criterion 10: calibration ------------------------------------------

#[test]
fn criterion_10_interval_calibration() {
    let cfg = SimConfig {
        k: 3,
        subjects: 250,
        obs_per_task: 25,
        mean_degree: 1.5,
        noise_var: 1e-2,
        seed: 1010,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let truth = sim::sample_ground_truth(&cfg, &mut rng);
    let obs = sim::sample_trajectories(&truth, &cfg, &mut rng).unwrap();

    // condition on early observations, hold out the rest
    let cut = 0.7 * (cfg.t_max - cfg.t_min) + cfg.t_min;
    let train_records: Vec<Record> = obs
        .records()
        .iter()
        .filter(|r| r.time < cut)
        .cloned()
        .collect();
    let train = ObservationSet::new(train_records, cfg.k, cfg.subjects).unwrap();

    let settings = FitSettings {
        mode: FitMode::StructGp,
        lambda_grid: vec![0.3, 0.05],
        lagrangian: LagrangianConfig {
            inner_steps: 60,
            max_outer: 6,
            ..Default::default()
        },
        adam_steps: 100,
        learn_noise: true,
        noise_init: 0.1,
        seed: 13,
        ..Default::default()
    };
    let fitted = fit::fit(&train, &settings, None).unwrap();
    let std = fitted.params.standardize().unwrap();

    let mut held_out = 0usize;
    let mut covered = 0usize;
    for subject in 0..cfg.subjects {
        let recs = obs.subject_records(subject);
        let train_rows: Vec<(usize, f64)> = recs
            .iter()
            .filter(|r| r.time < cut)
            .map(|r| (r.task, r.time))
            .collect();
        let y = DVector::from_iterator(
            train_rows.len(),
            recs.iter().filter(|r| r.time < cut).map(|r| r.value),
        );
        let query: Vec<&Record> = recs.iter().filter(|r| r.time >= cut).collect();
        if query.is_empty() || train_rows.is_empty() {
            continue;
        }
        let q_rows: Vec<(usize, f64)> = query.iter().map(|r| (r.task, r.time)).collect();
        let k_train = std.assemble_train(&train_rows);
        let k_cross = std.assemble_cross(&train_rows, &q_rows);
        let prior: Vec<f64> = q_rows.iter().map(|&(v, _)| std.cross_cov(v, v, 0.0)).collect();
        let q_noise: Vec<f64> = q_rows
            .iter()
            .map(|&(v, _)| fitted.params.noise[v].powi(2))
            .collect();
        let post = gp::posterior_predict(&k_train, &k_cross, &prior, &y, &q_noise).unwrap();
        for (q, rec) in query.iter().enumerate() {
            held_out += 1;
            if post.lo95[q] <= rec.value && rec.value <= post.hi95[q] {
                covered += 1;
            }
        }
    }
    let coverage = covered as f64 / held_out as f64;
    println!("  calibration: {held_out} held-out points, coverage {coverage:.4}");
    report(
        10,
        "95% interval coverage in [0.92, 0.98]",
        held_out >= 5000 && (0.92..=0.98).contains(&coverage),
    );
}

// --- criterion 11: constraint satisfaction -------------------------------

#[test]
fn criterion_11_constraint_satisfaction() {
    let cfg = SimConfig {
        k: 3,
        subjects: 60,
        obs_per_task: 15,
        mean_degree: 1.0,
        noise_var: 1e-2,
        seed: 1111,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let truth = sim::sample_ground_truth(&cfg, &mut rng);
    let obs = sim::sample_trajectories(&truth, &cfg, &mut rng).unwrap();
    let settings = FitSettings {
        mode: FitMode::StructGp,
        lambda_grid: vec![0.3, 0.05],
        lagrangian: LagrangianConfig {
            inner_steps: 80,
            max_outer: 8,
            ..Default::default()
        },
        adam_steps: 100,
        learn_noise: false,
        noise_init: 0.1,
        seed: 14,
        ..Default::default()
    };
    let mut ok = true;
    for mode in [FitMode::StructGp, FitMode::LpStructGp] {
        let fitted = fit::fit(&obs, &FitSettings { mode, epochs: 4, ..settings.clone() }, None)
            .unwrap();
        let structure = fitted.structure.as_ref().unwrap();
        let k = structure.adjacency.k;
        let thresholded =
            DMatrix::from_fn(k, k, |v, u| if v == u { 0.0 } else { structure.weights[v][u] });
        let (h_hard, _) = acyclicity(&thresholded);
        if h_hard != 0.0 || fitted.smooth_h >= 0.01 {
            ok = false;
        }
        println!(
            "  {mode}: smooth h {:.2e}, thresholded h {:.1e}",
            fitted.smooth_h, h_hard
        );
    }
    report(11, "h = 0 after thresholding, smooth h < 0.01", ok);
}
