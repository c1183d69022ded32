//! Context-aware variational autoencoder (CWVAE) for If-Then event inference.
//!
//! The crate bundles a small float64 autodiff engine, corpus readers, the
//! CWVAE model with three baseline generators, the two-stage training
//! schedule, and perplexity / BLEU / distinct-n evaluation.

pub mod error;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod latent;
pub mod models;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
