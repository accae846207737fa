//! Conditional density estimation over recursive partitions of the unit cube.
//!
//! The estimators are penalized maximum likelihood estimators built from two
//! model families that are piecewise in the covariate:
//!
//! * piecewise squared-polynomial densities on product partitions
//!   ([`polydens`]),
//! * Gaussian mixtures with shared components and per-cell mixing
//!   proportions ([`spatial_gmm`]), the work-horse for unsupervised
//!   segmentation.
//!
//! Model selection ([`selection`]) minimizes `-log-likelihood + penalty` by
//! dynamic programming over tree-structured partition collections
//! ([`geometry`]), with the penalty constant either supplied, derived from
//! theory-mode bounds, or calibrated by the slope heuristic. Estimation
//! quality is measured with Kullback-Leibler type divergences and their
//! tensorized versions over a design ([`divergence`]); [`simulate`] provides
//! synthetic ground truths and a risk harness.

pub mod dataset;
pub mod divergence;
pub mod geometry;
pub mod io;
pub mod polydens;
pub mod selection;
pub mod simulate;
pub mod spatial_gmm;

mod seed;

pub use dataset::Dataset;
pub use seed::derive_seed;

use thiserror::Error;

/// Error type shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A point or parameter lies outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),
    /// A documented precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An enumeration or search exceeded its configured budget.
    #[error("resource budget exceeded: {0}")]
    Resource(String),
    /// A matrix factorization failed (non-SPD covariance, singular system).
    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),
    /// A mixture component collapsed during fitting.
    #[error("degenerate fit: component {component}: {message}")]
    Degenerate { component: usize, message: String },
    /// Slope calibration could not be performed on the supplied models.
    #[error("calibration failed: {0}")]
    Calibration(String),
    /// Rejection sampling gave up.
    #[error("sampler failure: {0}")]
    Sampler(String),
    /// Model selection had no admissible candidate.
    #[error("selection failed: {0}")]
    Selection(String),
    /// A file or byte stream does not conform to its documented format.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
