//! Extreme deconvolution: estimate the error-free distribution of a
//! d-dimensional quantity as a Gaussian mixture, from observations that are
//! noisy (per-point noise covariance) and incomplete (per-point projection).
//!
//! The main entry points are [`em::fit_em`] and [`smem::fit_smem`];
//! [`select::cross_validate`] picks the number of components and the
//! covariance regularizer, and [`linefit::fit_line`] applies the method to
//! straight-line fitting.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod em;
pub mod error;
pub mod gauss;
pub mod io;
pub mod linefit;
pub mod model;
pub mod select;
pub mod smem;

pub use em::{
    e_step, fit_em, initialize, m_step, m_step_full_prior, point_loglike, total_loglike, EStepResult, FitConfig,
    FitResult, FixedMask, Hyperparameters,
};
pub use error::{Diagnostic, Error, Result};
pub use gauss::{log_normal_density, logsumexp, Gaussian, PartitionedGaussian};
pub use linefit::{fit_line, jackknife_errors, LineFitResult, LineWarning};
pub use model::{observe, sample_latent, Dataset, GaussianComponent, MixtureModel, Observation};
pub use select::{cross_validate, heldout_loglike, CvPlan, CvTable, Restriction};
pub use smem::{fit_smem, CandidateTriplet, SmemResult};
