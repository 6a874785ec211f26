//! Noise estimators `eps(x_t, t)`.
//!
//! Both implementations evaluate on the tape that owns `x_t`, so the same
//! call serves plain sampling (on a [`Tape::no_grad`](crate::tensor::Tape::no_grad)
//! tape) and guided sampling, which backpropagates through the estimator.

mod conv;
mod gmm;

pub use conv::{train_denoiser, ConvDenoiser, ConvDenoiserConfig, TrainConfig, TrainingLog, MANIFEST_KIND};
pub use gmm::{gmm_eps, GmmDenoiser, GmmPrior};

use crate::error::Result;
use crate::schedule::NoiseSchedule;
use crate::tensor::Var;

pub trait Denoiser: Send + Sync {
    /// Predicted noise for `x_t` at step `t`; same shape as `x_t`.
    fn eps<'t>(&self, x_t: Var<'t>, t: usize, schedule: &NoiseSchedule) -> Result<Var<'t>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn eps<'t>(&self, x_t: Var<'t>, t: usize, schedule: &NoiseSchedule) -> Result<Var<'t>> {
        (**self).eps(x_t, t, schedule)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn eps<'t>(&self, x_t: Var<'t>, t: usize, schedule: &NoiseSchedule) -> Result<Var<'t>> {
        (**self).eps(x_t, t, schedule)
    }
}
