//! Kronecker neural networks with adaptive activations.
//!
//! The crate covers the model itself ([`network`]), its activation families
//! ([`activations`]), reverse-mode differentiation with order-2 input jets
//! ([`autodiff`]), gradient-flow checks on two-layer networks ([`theory`]),
//! training ([`training`]), datasets ([`data`]) and the named experiments
//! driven by the command line ([`experiment`]).

pub mod activations;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod network;
pub mod theory;
pub mod training;

pub use error::{KronError, Result};
