//! Synthesis of 12-lead ECG from single-channel PPG.
//!
//! The pipeline: condition raw recordings ([`signals`]), detect beats
//! ([`qrs`]), assign cardiac groups ([`groupfinder`]), train a
//! group-aware denoising diffusion model ([`model`], [`diffusion`],
//! [`spectral`]) and score generated leads ([`eval`]).

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod signals;
pub mod groupfinder;
pub mod model;
pub mod qrs;
pub mod spectral;

pub use error::{Error, Result};
