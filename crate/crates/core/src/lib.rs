//! Latent-variable dialogue model at desk scale.
//!
//! A conditional-VAE encoder–decoder over token sequences, trained with KL
//! annealing and word dropout on a built-in reverse-mode autodiff core, plus
//! the decoding strategies (ML beam, MMI anti-LM beam, temperature sampling,
//! latent shell sampling) and reply-diversity statistics used to compare them.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;

pub mod cli;

pub use error::{Error, Result};
