//! Gradient-guided diffusion inpainting at desk scale.
//!
//! The crate contains a small reverse-mode autodiff engine ([`tensor`]),
//! DDPM noise schedules ([`schedule`]), exact and trainable noise estimators
//! ([`denoisers`]), the harmonization losses ([`losses`]), the inpainting
//! samplers ([`samplers`]) and the tooling around them: mask generation,
//! proxy metrics, image/tensor I/O and experiment orchestration.

pub mod config;
pub mod denoisers;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod pnm;
pub mod priors;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use masks::Mask;
pub use tensor::{Tape, Tensor, Var};
