//! Two-layer hidden Markov model recognition of interaction situations and
//! Gaussian-mixture scene prediction for highway ramp merging.
//!
//! The pipeline: [`scenario`] produces or loads events, [`tlhmm`] recognizes
//! which situation is unfolding, [`scene`] samples how the scene continues
//! given that belief, and [`baselines`] provides reference classifiers and
//! recognition metrics. [`cli`] wires it all into the `tlhmm-scene` binary.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod gmm;
pub mod hmm;
pub mod linalg;
pub mod random;
pub mod scenario;
pub mod scene;
pub mod tlhmm;

pub use error::{Error, Result};
