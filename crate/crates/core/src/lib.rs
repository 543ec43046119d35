//! Contextual biasing for end-to-end transducer speech recognition, trained
//! with an intermediate biasing loss.
//!
//! The crate is self-contained: a small reverse-mode differentiation tape
//! ([`numerics`]) drives a conformer-style encoder with cross-attention
//! biasing taps ([`transducer_model`], [`biasing`], [`context`]), CTC and
//! transducer lattice losses ([`losses`]), transducer-driven beam search with
//! CTC prefix scoring ([`decoding`]) and biased/unbiased word error scoring
//! ([`metrics`]). [`datagen`] synthesises a toy corpus on which the whole
//! pipeline trains in minutes, and [`harness`] holds the optimiser, training
//! loop and experiment presets.

pub mod biasing;
pub mod context;
pub mod datagen;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod transducer_model;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamStore, Tensor, Var};
