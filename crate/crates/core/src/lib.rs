//! Talking-to-me detection on egocentric recordings: a head-orientation
//! branch, a lip patch transformer, a shared-weight noise-robust audio
//! encoder, missing-modality prompts and cross-attention fusion, together
//! with a seeded synthetic scenario generator and evaluation tools.

pub mod config;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod headpose;
pub mod lipenc;
pub mod model;
pub(crate) mod nn;
pub mod psa;
pub mod rng;
pub mod scenario;
pub mod train;
pub mod vmma;

pub use config::RunConfig;
pub use error::{CoreError, Result};
pub use model::{Prepared, TtmModel, Variant};
