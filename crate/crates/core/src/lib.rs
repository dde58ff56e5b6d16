//! Full-duplex latent reasoning over a symbolic two-channel dialogue stream.
//!
//! A causal agent listens to a user channel one frame at a time. While the
//! user speaks it feeds back a vocabulary-weighted mixture of its own
//! embeddings instead of a discrete token, and a timing head decides when to
//! take the turn. Training follows a conditional ELBO against a bidirectional
//! expert that sees the whole dialogue.

pub mod error;
pub mod numerics;
pub mod corpus;
pub mod model;
pub mod engine;
pub mod evalsuite;
pub mod schema;
pub mod training;

pub use error::{Error, Result};
