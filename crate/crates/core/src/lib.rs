//! Experience-aware rating prediction from review text.
//!
//! Users progress through discrete experience levels; at each level they
//! have their own facet preferences and word usage. Training alternates a
//! collapsed Gibbs sampler over levels and facets with per-user support
//! vector regressions whose weights become the sampler's Dirichlet prior.

pub mod baselines;
pub mod cli;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod regression;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
