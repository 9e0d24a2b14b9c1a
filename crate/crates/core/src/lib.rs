//! Integration of external regression-model summaries into an internal GLM.
//!
//! The pipeline fits the internal model by maximum likelihood, calibrates it
//! against each external model through a constrained semiparametric
//! likelihood, shrinks each constrained estimate back toward the internal one
//! with an empirical-Bayes rule, and finally combines the shrunken estimates
//! (inverse prediction-variance weighting, simplex-optimal covariance
//! weighting, or per-coefficient selective weighting). Joint asymptotic
//! covariances drive both the weights and the reported standard errors.

pub mod asymptotics;
pub mod cli;
pub mod combiners;
pub mod cspml;
pub mod data;
pub mod error;
pub mod glm;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sim;

pub use data::{build_design, map_indices, recenter_external, Dataset, ExternalModelSpec, IndexMap, Link, Recenter};
pub use error::{Error, Result};
pub use glm::{fit_mle, GlmFit};
