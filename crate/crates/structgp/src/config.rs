//! Run configuration: every hyperparameter with a recorded default,
//! loadable from a `key = value` file and overridable one key at a time.
//! The resolved configuration is echoed verbatim into every output
//! artifact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{FitMode, FitSettings};
use crate::learn::LagrangianConfig;
use crate::sim::SimConfig;

/// How observation noise is parameterized across tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    Shared,
    PerTask,
}

/// The full resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: FitMode,
    pub seed: u64,
    // sparsity grid
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub lambda_points: usize,
    pub beta_l1: f64,
    // constrained solver
    pub epsilon: f64,
    pub rho_max: f64,
    pub inner_steps: usize,
    pub max_outer: usize,
    pub adam_lr: f64,
    pub adam_steps: usize,
    // noise
    pub learn_noise: bool,
    pub noise_mode: NoiseMode,
    pub noise_init: f64,
    // pathways
    pub pathways: usize,
    pub gamma: f64,
    pub batch_subjects: usize,
    /// subjects per stochastic gradient step in the constrained graph fit
    /// (0 = exact full-batch)
    pub graph_batch: usize,
    pub epochs: usize,
    // low-rank approximation
    pub hsgp_m: usize,
    pub boundary_factor: f64,
    // streaming accumulators
    pub beta_decay: f64,
    // simulation
    pub sim_k: usize,
    pub sim_subjects: usize,
    pub obs_per_task: usize,
    pub mean_degree: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub log_l_min: f64,
    pub log_l_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub noise_var: f64,
    pub latent: bool,
    pub repetitions: usize,
    // metadata only
    pub time_unit: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: FitMode::StructGp,
            seed: 0,
            lambda_max: 10.0,
            lambda_min: 1e-3,
            lambda_points: 20,
            beta_l1: 100.0,
            epsilon: 0.01,
            rho_max: 1e8,
            inner_steps: 300,
            max_outer: 20,
            adam_lr: 0.02,
            adam_steps: 300,
            learn_noise: true,
            noise_mode: NoiseMode::PerTask,
            noise_init: 0.1,
            pathways: 2,
            gamma: 0.3,
            batch_subjects: 8,
            graph_batch: 0,
            epochs: 10,
            hsgp_m: 256,
            boundary_factor: 4.0,
            beta_decay: 1.0,
            sim_k: 10,
            sim_subjects: 100,
            obs_per_task: 25,
            mean_degree: 2.0,
            weight_min: 0.5,
            weight_max: 1.5,
            log_l_min: 0.0,
            log_l_max: 1.0,
            t_min: 0.0,
            t_max: 10.0,
            noise_var: 1e-2,
            latent: false,
            repetitions: 30,
            time_unit: "hours".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
}

fn parse_mode(value: &str) -> Result<FitMode> {
    Ok(match value {
        "independent" => FitMode::Independent,
        "no-structure" => FitMode::NoStructure,
        "structgp" => FitMode::StructGp,
        "lp-structgp" => FitMode::LpStructGp,
        "lp-fixed" => FitMode::LpFixed,
        other => {
            return Err(Error::Config(format!(
                "unknown mode {other:?} (expected independent | no-structure | structgp | lp-structgp | lp-fixed)"
            )))
        }
    })
}

impl RunConfig {
    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "mode" => self.mode = parse_mode(value)?,
            "seed" => self.seed = parse(key, value)?,
            "lambda_max" => self.lambda_max = parse(key, value)?,
            "lambda_min" => self.lambda_min = parse(key, value)?,
            "lambda_points" => self.lambda_points = parse(key, value)?,
            "beta_l1" => self.beta_l1 = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "rho_max" => self.rho_max = parse(key, value)?,
            "inner_steps" => self.inner_steps = parse(key, value)?,
            "max_outer" => self.max_outer = parse(key, value)?,
            "adam_lr" => self.adam_lr = parse(key, value)?,
            "adam_steps" => self.adam_steps = parse(key, value)?,
            "learn_noise" => self.learn_noise = parse(key, value)?,
            "noise_mode" => {
                self.noise_mode = match value {
                    "shared" => NoiseMode::Shared,
                    "per-task" => NoiseMode::PerTask,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown noise_mode {other:?} (expected shared | per-task)"
                        )))
                    }
                }
            }
            "noise_init" => self.noise_init = parse(key, value)?,
            "pathways" => self.pathways = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "batch_subjects" => self.batch_subjects = parse(key, value)?,
            "graph_batch" => self.graph_batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "hsgp_m" => self.hsgp_m = parse(key, value)?,
            "boundary_factor" => self.boundary_factor = parse(key, value)?,
            "beta_decay" => self.beta_decay = parse(key, value)?,
            "sim_k" => self.sim_k = parse(key, value)?,
            "sim_subjects" => self.sim_subjects = parse(key, value)?,
            "obs_per_task" => self.obs_per_task = parse(key, value)?,
            "mean_degree" => self.mean_degree = parse(key, value)?,
            "weight_min" => self.weight_min = parse(key, value)?,
            "weight_max" => self.weight_max = parse(key, value)?,
            "log_l_min" => self.log_l_min = parse(key, value)?,
            "log_l_max" => self.log_l_max = parse(key, value)?,
            "t_min" => self.t_min = parse(key, value)?,
            "t_max" => self.t_max = parse(key, value)?,
            "noise_var" => self.noise_var = parse(key, value)?,
            "latent" => self.latent = parse(key, value)?,
            "repetitions" => self.repetitions = parse(key, value)?,
            "time_unit" => self.time_unit = value.to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a `key = value` file: one assignment per line, `#` comments
    /// and blank lines ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Validate cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.beta_decay) {
            return Err(Error::Config(format!(
                "beta_decay {} outside [0, 1]",
                self.beta_decay
            )));
        }
        if self.lambda_min <= 0.0 || self.lambda_max < self.lambda_min {
            return Err(Error::Config("lambda grid bounds must satisfy 0 < min <= max".into()));
        }
        if self.lambda_points == 0 || self.pathways == 0 || self.batch_subjects == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if self.t_max < self.t_min {
            return Err(Error::Config("t_max must be >= t_min".into()));
        }
        if self.mean_degree >= self.sim_k as f64 {
            return Err(Error::Config("mean_degree must be < sim_k".into()));
        }
        Ok(())
    }

    /// Descending log-spaced sparsity grid from the bounds.
    pub fn lambda_grid(&self) -> Vec<f64> {
        let n = self.lambda_points;
        if n == 1 {
            return vec![self.lambda_max];
        }
        let (hi, lo) = (self.lambda_max.ln(), self.lambda_min.ln());
        (0..n)
            .map(|i| (hi + (lo - hi) * i as f64 / (n - 1) as f64).exp())
            .collect()
    }

    pub fn fit_settings(&self) -> FitSettings {
        FitSettings {
            mode: self.mode,
            lambda_grid: self.lambda_grid(),
            beta_l1: self.beta_l1,
            lagrangian: LagrangianConfig {
                epsilon: self.epsilon,
                rho_max: self.rho_max,
                inner_steps: self.inner_steps,
                lr: self.adam_lr,
                max_outer: self.max_outer,
            },
            adam_steps: self.adam_steps,
            adam_lr: self.adam_lr,
            learn_noise: self.learn_noise,
            shared_noise: self.noise_mode == NoiseMode::Shared,
            noise_init: self.noise_init,
            pathways: self.pathways,
            gamma: self.gamma,
            batch_subjects: self.batch_subjects,
            graph_batch_subjects: self.graph_batch,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            k: self.sim_k,
            subjects: self.sim_subjects,
            obs_per_task: self.obs_per_task,
            mean_degree: self.mean_degree,
            weight_min: self.weight_min,
            weight_max: self.weight_max,
            log_l_min: self.log_l_min,
            log_l_max: self.log_l_max,
            t_min: self.t_min,
            t_max: self.t_max,
            noise_var: self.noise_var,
            pathways: self.pathways,
            latent_weight: self.gamma,
            latent: self.latent,
            repetitions: self.repetitions,
            seed: self.seed,
        }
    }

    /// The verbatim echo embedded in every output artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
