//! Directional multivariate ranking over multi-aspect ratings.
//!
//! A user's preference between two items is modeled as the *direction* of the
//! difference between their multivariate rating vectors. The likelihood of an
//! observed difference `d` under a Gaussian belief `N(d̂, Σ)` about the
//! difference is a line integral along the ray `{γ·d : γ ≥ ξ}`, which has a
//! closed form in terms of the scaled complementary error function. Maximizing
//! that likelihood trains a probabilistic multivariate tensor factorization
//! (PMTF): latent factors for users, items, and aspects plus personalized
//! covariance matrices for users and items.
//!
//! Module map:
//! - [`special`]: `erf`/`erfc`/`erfcx` and friends, implemented for the
//!   log-space stability the training objective needs.
//! - [`dirlik`]: the directional likelihood itself, its quadrature oracle,
//!   and marginalization over unobserved aspects.
//! - [`model`]: the PMTF parameter set, prediction, covariance composition,
//!   and checkpoint serialization.
//! - [`objective`]: per-triple objective values and analytic gradients, with
//!   a finite-difference harness that gates them.
//! - [`trainer`]: bootstrap triple sampling, AdaGrad, and the two-phase
//!   training loop (factors, then covariances).
//! - [`eval`]: ranking metrics, pairwise accuracy, confidence buckets, and
//!   aspect-level explanations.
//! - [`data`]: the TSV rating format, filtering, splitting, global covariance
//!   estimation, and synthetic dataset generation.
//! - [`verify`]: the self-check suites (closed form vs. quadrature, analytic
//!   vs. finite-difference gradients, metrics vs. brute force).

pub mod data;
pub mod dirlik;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod special;
pub mod trainer;
pub mod verify;

pub use error::DmrError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, DmrError>;
