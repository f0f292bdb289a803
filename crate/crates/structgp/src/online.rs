//! Streaming low-rank-plus-block-diagonal linear algebra.
//!
//! The joint covariance is `K = Phi Phi^T + M` with block-diagonal `M`.
//! Blocks arrive in mini-batches; geometrically discounted accumulators
//! `(C, D)` summarize the low-rank coupling seen so far, yielding Woodbury
//! inverse actions and incremental log-determinants without revisiting
//! earlier batches. The per-batch conditional NMLL terms telescope to the
//! exact full-data NMLL when the decay is 1.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::cholesky_with_jitter;
use crate::par;

/// One subject-level block: values, feature rows, and the local SPD
/// covariance.
#[derive(Debug, Clone)]
pub struct Block {
    pub v: DVector<f64>,
    pub phi: DMatrix<f64>,
    pub m: DMatrix<f64>,
}

/// A mini-batch of blocks.
#[derive(Debug, Clone, Default)]
pub struct BatchBlocks {
    pub blocks: Vec<Block>,
}

/// Discounted low-rank sufficient statistics plus the running
/// log-determinant pieces.
#[derive(Debug, Clone)]
pub struct AccumulatorState {
    /// q x q Gram accumulator, symmetric PSD
    pub c: DMatrix<f64>,
    /// length-q projected-data accumulator
    pub d: DVector<f64>,
    /// running sum of block log-determinants
    pub logdet_m_running: f64,
    /// log det(I + C) after the previous batch
    pub logdet_ic_prev: f64,
    /// discounted quadratic form y^T M^-1 y accumulator
    pub quad_raw: f64,
    /// full quadratic form y^T K^-1 y after the previous batch
    pub quad_prev: f64,
    /// decay in [0, 1]; 1 keeps full memory, 0 keeps only the current batch
    pub beta: f64,
    pub epoch: usize,
}

/// Inverse actions and incremental NMLL pieces for one processed batch.
#[derive(Debug, Clone)]
pub struct BatchSolution {
    /// per-block components of K^-1 v for the current batch
    pub x: Vec<DVector<f64>>,
    /// sum of block logdet M_i plus the increment of logdet(I + C)
    pub delta_logdet: f64,
    /// increment of the full quadratic form y^T K^-1 y
    pub delta_quad: f64,
    pub n_obs: usize,
}

impl AccumulatorState {
    pub fn new(q: usize, beta: f64) -> Self {
        assert!((0.0..=1.0).contains(&beta));
        Self {
            c: DMatrix::zeros(q, q),
            d: DVector::zeros(q),
            logdet_m_running: 0.0,
            logdet_ic_prev: 0.0,
            quad_raw: 0.0,
            quad_prev: 0.0,
            beta,
            epoch: 0,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.c.nrows()
    }

    /// Reset the per-epoch telescoping baselines so each epoch's loss is
    /// comparable; the accumulators themselves keep their (discounted)
    /// memory.
    pub fn start_epoch(&mut self) {
        self.logdet_ic_prev = (DMatrix::identity(self.feature_width(), self.feature_width())
            + &self.c)
            .cholesky()
            .map(|ch| 2.0 * ch.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>())
            .unwrap_or(0.0);
        self.quad_prev = self.current_quad();
        self.logdet_m_running = 0.0;
        self.epoch += 1;
    }

    fn current_quad(&self) -> f64 {
        let q = self.feature_width();
        let ic = DMatrix::identity(q, q) + &self.c;
        match ic.cholesky() {
            Some(ch) => self.quad_raw - self.d.dot(&ch.solve(&self.d)),
            None => self.quad_raw,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(AccumulatorJson::from(self)).unwrap()
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let j: AccumulatorJson = serde_json::from_value(v.clone())?;
        if j.version != ACCUMULATOR_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported accumulator checkpoint version {}",
                j.version
            )));
        }
        let q = j.q;
        if j.c.len() != q * q || j.d.len() != q {
            return Err(Error::Data("accumulator checkpoint shape mismatch".into()));
        }
        Ok(Self {
            c: DMatrix::from_row_slice(q, q, &j.c),
            d: DVector::from_vec(j.d),
            logdet_m_running: j.logdet_m_running,
            logdet_ic_prev: j.logdet_ic_prev,
            quad_raw: j.quad_raw,
            quad_prev: j.quad_prev,
            beta: j.beta,
            epoch: j.epoch,
        })
    }
}

const ACCUMULATOR_FORMAT_VERSION: u32 = 1;

/// Versioned checkpoint format for the accumulator state.
#[derive(Serialize, Deserialize)]
struct AccumulatorJson {
    version: u32,
    q: usize,
    /// row-major q x q
    c: Vec<f64>,
    d: Vec<f64>,
    logdet_m_running: f64,
    logdet_ic_prev: f64,
    quad_raw: f64,
    quad_prev: f64,
    beta: f64,
    epoch: usize,
}

impl From<&AccumulatorState> for AccumulatorJson {
    fn from(s: &AccumulatorState) -> Self {
        Self {
            version: ACCUMULATOR_FORMAT_VERSION,
            q: s.feature_width(),
            c: s.c.transpose().as_slice().to_vec(),
            d: s.d.as_slice().to_vec(),
            logdet_m_running: s.logdet_m_running,
            logdet_ic_prev: s.logdet_ic_prev,
            quad_raw: s.quad_raw,
            quad_prev: s.quad_prev,
            beta: s.beta,
            epoch: s.epoch,
        }
    }
}

/// Process one mini-batch: per-block inverse actions `A_i = M_i^-1 v_i`,
/// `B_i = M_i^-1 Phi_i`, local contributions `d_i`, `c_i`, discount and
/// accumulate, then return the Woodbury-corrected solutions
/// `x_i = A_i - B_i E` with `E = (I + C)^-1 D`, the incremental
/// log-determinant, and the incremental quadratic form.
pub fn update_and_solve(
    state: &mut AccumulatorState,
    batch: &BatchBlocks,
) -> Result<BatchSolution> {
    let q = state.feature_width();
    for (i, b) in batch.blocks.iter().enumerate() {
        if b.phi.ncols() != q || b.phi.nrows() != b.v.len() || b.m.nrows() != b.v.len() {
            return Err(Error::Data(format!(
                "block {i}: dimension mismatch against feature width {q}"
            )));
        }
    }

    struct Local {
        a: DVector<f64>,
        b: DMatrix<f64>,
        d: DVector<f64>,
        c: DMatrix<f64>,
        logdet_m: f64,
        quad: f64,
    }
    let locals = par::map_collect(&batch.blocks, |blk| -> Result<Local> {
        let (chol, jitter) = cholesky_with_jitter(&blk.m)?;
        if jitter > 1e-6 {
            return Err(Error::Numerical(format!(
                "block covariance required jitter {jitter} > 1e-6"
            )));
        }
        let a = chol.solve(&blk.v);
        let b = chol.solve(&blk.phi);
        Ok(Local {
            d: blk.phi.transpose() * &a,
            c: blk.phi.transpose() * &b,
            logdet_m: 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>(),
            quad: blk.v.dot(&a),
            a,
            b,
        })
    });
    let mut sum_logdet_m = 0.0;
    let mut resolved = Vec::with_capacity(locals.len());
    for (i, res) in locals.into_iter().enumerate() {
        let local = res.map_err(|e| Error::SubjectBlock {
            subject: i,
            source: Box::new(e),
        })?;
        sum_logdet_m += local.logdet_m;
        resolved.push(local);
    }

    // discount, then accumulate (serialized reduction)
    state.c *= state.beta;
    state.d *= state.beta;
    state.quad_raw *= state.beta;
    if state.beta == 0.0 {
        state.logdet_ic_prev = 0.0;
        state.quad_prev = 0.0;
    }
    for local in &resolved {
        state.c += &local.c;
        state.d += &local.d;
        state.quad_raw += local.quad;
    }

    let ic = DMatrix::identity(q, q) + &state.c;
    let chol_ic = ic.cholesky().ok_or_else(|| {
        Error::Numerical("I + C is not positive definite (conditioning failure)".into())
    })?;
    let e = chol_ic.solve(&state.d);
    let logdet_ic = 2.0 * chol_ic.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();

    let x: Vec<DVector<f64>> = resolved
        .iter()
        .map(|local| &local.a - &local.b * &e)
        .collect();

    let delta_logdet = sum_logdet_m + logdet_ic - state.logdet_ic_prev;
    let quad_now = state.quad_raw - state.d.dot(&e);
    let delta_quad = quad_now - state.quad_prev;

    state.logdet_m_running += sum_logdet_m;
    state.logdet_ic_prev = logdet_ic;
    state.quad_prev = quad_now;

    let n_obs = batch.blocks.iter().map(|b| b.v.len()).sum();
    Ok(BatchSolution {
        x,
        delta_logdet,
        delta_quad,
        n_obs,
    })
}

/// Conditional NMLL contribution of one processed batch:
/// `1/2 delta_quad + 1/2 delta_logdet + N_t/2 log 2pi`. With decay 1 and a
/// single sequential pass the terms sum to the exact full-data NMLL.
pub fn conditional_nmll(solution: &BatchSolution) -> f64 {
    0.5 * solution.delta_quad
        + 0.5 * solution.delta_logdet
        + 0.5 * solution.n_obs as f64 * (2.0 * std::f64::consts::PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::nmll;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * (0.5 + rng.gen_range(0.0..0.5))
    }

    fn random_block(n: usize, q: usize, rng: &mut ChaCha8Rng) -> Block {
        Block {
            v: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            phi: DMatrix::from_fn(n, q, |_, _| rng.gen_range(-0.7..0.7)),
            m: random_spd(n, rng),
        }
    }

    fn dense_k(blocks: &[Block]) -> (DMatrix<f64>, DVector<f64>) {
        let n: usize = blocks.iter().map(|b| b.v.len()).sum();
        let q = blocks[0].phi.ncols();
        let mut phi = DMatrix::zeros(n, q);
        let mut m = DMatrix::zeros(n, n);
        let mut y = DVector::zeros(n);
        let mut off = 0;
        for b in blocks {
            let nb = b.v.len();
            phi.view_mut((off, 0), (nb, q)).copy_from(&b.phi);
            m.view_mut((off, off), (nb, nb)).copy_from(&b.m);
            y.rows_mut(off, nb).copy_from(&b.v);
            off += nb;
        }
        (&phi * phi.transpose() + m, y)
    }

    #[test]
    fn zero_features_reduce_to_block_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut blocks = Vec::new();
        for _ in 0..3 {
            let mut b = random_block(4, 2, &mut rng);
            b.phi.fill(0.0);
            blocks.push(b);
        }
        let mut state = AccumulatorState::new(2, 1.0);
        let sol = update_and_solve(&mut state, &BatchBlocks { blocks: blocks.clone() }).unwrap();
        let mut expect_logdet = 0.0;
        for (i, b) in blocks.iter().enumerate() {
            let inv = b.m.clone().try_inverse().unwrap();
            let x = &inv * &b.v;
            for (a, e) in sol.x[i].iter().zip(x.iter()) {
                assert_relative_eq!(a, e, epsilon = 1e-10);
            }
            expect_logdet += b.m.determinant().ln();
        }
        assert_relative_eq!(sol.delta_logdet, expect_logdet, epsilon = 1e-9);
    }

    #[test]
    fn scalar_blocks_match_dense() {
        // M = [1],[1]; Phi = [1],[1]; v = (1,1): dense K = [[2,1],[1,2]]
        let blocks = vec![
            Block {
                v: DVector::from_element(1, 1.0),
                phi: DMatrix::from_element(1, 1, 1.0),
                m: DMatrix::from_element(1, 1, 1.0),
            },
            Block {
                v: DVector::from_element(1, 1.0),
                phi: DMatrix::from_element(1, 1, 1.0),
                m: DMatrix::from_element(1, 1, 1.0),
            },
        ];
        let mut state = AccumulatorState::new(1, 1.0);
        let sol = update_and_solve(&mut state, &BatchBlocks { blocks }).unwrap();
        assert_relative_eq!(sol.x[0][0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1][0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(sol.delta_logdet, 3.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn woodbury_matches_dense_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..50 {
            let q = rng.gen_range(1..=4);
            let blocks: Vec<Block> = (0..rng.gen_range(1..=4))
                .map(|_| random_block(rng.gen_range(2..=6), q, &mut rng))
                .collect();
            let (k, y) = dense_k(&blocks);
            let inv = k.clone().try_inverse().unwrap();
            let dense_x = &inv * &y;
            let mut state = AccumulatorState::new(q, 1.0);
            let sol = update_and_solve(&mut state, &BatchBlocks { blocks: blocks.clone() }).unwrap();
            let mut off = 0;
            for (i, b) in blocks.iter().enumerate() {
                for (j, got) in sol.x[i].iter().enumerate() {
                    assert_relative_eq!(*got, dense_x[off + j], max_relative = 1e-8, epsilon = 1e-10);
                }
                off += b.v.len();
            }
            // logdet identity
            assert_relative_eq!(
                sol.delta_logdet,
                k.determinant().ln(),
                max_relative = 1e-8,
                epsilon = 1e-9
            );
            let _ = trial;
        }
    }

    #[test]
    fn beta_zero_is_memoryless() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b1 = BatchBlocks { blocks: vec![random_block(4, 2, &mut rng)] };
        let b2 = BatchBlocks { blocks: vec![random_block(5, 2, &mut rng)] };
        let mut state = AccumulatorState::new(2, 0.0);
        update_and_solve(&mut state, &b1).unwrap();
        let sol_after = update_and_solve(&mut state, &b2).unwrap();
        let mut fresh = AccumulatorState::new(2, 0.0);
        let sol_fresh = update_and_solve(&mut fresh, &b2).unwrap();
        for (a, b) in sol_after.x[0].iter().zip(sol_fresh.x[0].iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_batch_conditional_equals_full_nmll() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blocks: Vec<Block> = (0..3).map(|_| random_block(5, 3, &mut rng)).collect();
        let (k, y) = dense_k(&blocks);
        let (expect, _) = nmll(&k, &y).unwrap();
        let mut state = AccumulatorState::new(3, 1.0);
        let sol = update_and_solve(&mut state, &BatchBlocks { blocks }).unwrap();
        assert_relative_eq!(conditional_nmll(&sol), expect, max_relative = 1e-8);
    }

    #[test]
    fn telescoping_recovers_full_nmll() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for splits in 2..=5 {
            let blocks: Vec<Block> = (0..splits * 2)
                .map(|_| random_block(rng.gen_range(3..=6), 3, &mut rng))
                .collect();
            let (k, y) = dense_k(&blocks);
            let (expect, _) = nmll(&k, &y).unwrap();
            let mut state = AccumulatorState::new(3, 1.0);
            let mut total = 0.0;
            for chunk in blocks.chunks(2) {
                let sol = update_and_solve(
                    &mut state,
                    &BatchBlocks { blocks: chunk.to_vec() },
                )
                .unwrap();
                total += conditional_nmll(&sol);
            }
            assert_relative_eq!(total, expect, max_relative = 1e-8, epsilon = 1e-8);
        }
    }

    #[test]
    fn phi_zero_batches_sum_to_per_block_nmll() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut blocks: Vec<Block> = (0..4).map(|_| random_block(4, 2, &mut rng)).collect();
        for b in &mut blocks {
            b.phi.fill(0.0);
        }
        let mut expect = 0.0;
        for b in &blocks {
            let (v, _) = nmll(&b.m, &b.v).unwrap();
            expect += v;
        }
        let mut state = AccumulatorState::new(2, 1.0);
        let mut total = 0.0;
        for chunk in blocks.chunks(2) {
            let sol =
                update_and_solve(&mut state, &BatchBlocks { blocks: chunk.to_vec() }).unwrap();
            total += conditional_nmll(&sol);
        }
        assert_relative_eq!(total, expect, max_relative = 1e-10);
    }

    #[test]
    fn discounted_accumulator_converges_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = random_block(4, 2, &mut rng);
        let beta = 0.8;
        let mut state = AccumulatorState::new(2, beta);
        let single = {
            let mut s = AccumulatorState::new(2, 0.0);
            update_and_solve(&mut s, &BatchBlocks { blocks: vec![block.clone()] }).unwrap();
            s.c.clone()
        };
        let c_inf = &single / (1.0 - beta);
        let c0_dist = c_inf.norm();
        let t = 12;
        for _ in 0..t {
            update_and_solve(&mut state, &BatchBlocks { blocks: vec![block.clone()] }).unwrap();
        }
        let dist = (&state.c - &c_inf).norm();
        assert!(dist <= beta.powi(t) * c0_dist * (1.0 + 1e-9), "{dist}");
    }

    #[test]
    fn accumulator_c_stays_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut state = AccumulatorState::new(3, 0.9);
        for _ in 0..5 {
            let blocks: Vec<Block> = (0..2).map(|_| random_block(4, 3, &mut rng)).collect();
            update_and_solve(&mut state, &BatchBlocks { blocks }).unwrap();
        }
        let sym = (&state.c - state.c.transpose()).norm();
        assert!(sym < 1e-10);
        let eig = state.c.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > -1e-8));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut state = AccumulatorState::new(2, 0.9);
        update_and_solve(
            &mut state,
            &BatchBlocks { blocks: vec![random_block(4, 2, &mut rng)] },
        )
        .unwrap();
        let j = state.to_json();
        let back = AccumulatorState::from_json(&j).unwrap();
        assert_eq!(state.c, back.c);
        assert_eq!(state.d, back.d);
        assert_eq!(state.quad_prev, back.quad_prev);
    }

    #[test]
    fn dimension_mismatch_reports_block() {
        let mut state = AccumulatorState::new(3, 1.0);
        let blocks = vec![Block {
            v: DVector::zeros(2),
            phi: DMatrix::zeros(2, 2), // wrong width
            m: DMatrix::identity(2, 2),
        }];
        assert!(update_and_solve(&mut state, &BatchBlocks { blocks }).is_err());
    }
}
