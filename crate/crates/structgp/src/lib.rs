//! Continuous-time multi-task Gaussian processes whose covariance is built
//! from Gaussian convolution filters with a learnable sparse DAG structure
//! over tasks, plus latent pathways over subjects, constrained
//! marginal-likelihood optimization, low-rank scalable inference, and a
//! simulation harness for structure-recovery experiments.

pub mod bundle;
pub mod config;
pub mod data;
pub mod error;
pub mod fit;
pub mod gp;
pub mod grad;
pub mod hsgp;
pub mod kernel;
pub mod latent;
pub mod learn;
pub mod metrics;
pub mod online;
pub mod par;
pub mod sim;

pub use error::{Error, Result};
