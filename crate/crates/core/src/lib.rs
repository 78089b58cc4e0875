//! Domain-constrained keyword generation: a latent-variable
//! encoder-decoder with a domain-word fusion term whose weight is chosen per
//! input by a learned policy.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod par;
pub mod rl;
pub mod rng;

pub use error::{Error, Result};
