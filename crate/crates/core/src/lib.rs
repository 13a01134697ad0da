//! Token-level image-text alignment.
//!
//! Pipeline: BPE token-mask corpus ([`corpus`]) -> visual encoder with an
//! upsampled feature grid ([`model`]) -> masked pooling ([`tensorcore`]) ->
//! alignment objectives ([`losses`]). [`abstractor`] and [`llmalign`] cover the
//! multi-crop, windowed compression and LLM-level alignment path; [`evalkit`]
//! holds the evaluation protocols and [`trainer`] wires it all together.

pub mod abstractor;
pub mod corpus;
pub mod evalkit;
pub mod llmalign;
pub mod losses;
pub mod model;
mod error;
pub mod tensorcore;
pub mod trainer;

pub use error::{Error, Result};
