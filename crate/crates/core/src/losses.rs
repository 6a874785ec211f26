//! Harmonization losses.
//!
//! Images are `[H, W, C]`; every loss is normalized by `H * W`. Spatial
//! derivatives are forward differences with replicate padding, so the last
//! column has `dx = 0` and the last row has `dy = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::tensor::{select, unit_vectors, Pad, Tape, Tensor, Var};

/// Norm at or below which a gradient vector is treated as zero.
pub const TAU: f64 = 1e-8;

pub const DEFAULT_LAMBDA_AL: f64 = 400.0;

/// Which image the alignment term is evaluated on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTarget {
    /// `M * x0_hat + (1 - M) * target`.
    #[default]
    Collage,
    RawX0Hat,
}

/// Unit-normalized gradient field of a single-channel `[H, W]` image.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub dx: Tensor,
    pub dy: Tensor,
}

pub fn normalized_gradient(image: &Tensor) -> Result<GradientField> {
    if image.ndim() != 2 {
        return Err(Error::invalid(
            "normalized_gradient",
            format!("expected a single-channel [H, W] image, got {:?}", image.shape()),
        ));
    }
    let tape = Tape::no_grad();
    let (dx, dy) = normalized_gradient_var(tape.constant(image.clone()))?;
    Ok(GradientField {
        dx: dx.value(),
        dy: dy.value(),
    })
}

/// Normalized forward differences along axes 1 (`dx`) and 0 (`dy`); any
/// trailing channel axis is treated independently.
pub fn normalized_gradient_var(x: Var<'_>) -> Result<(Var<'_>, Var<'_>)> {
    if x.shape().len() < 2 {
        return Err(Error::invalid("normalized_gradient", "need at least two axes"));
    }
    let dx = x.shift(1, 1, Pad::Replicate)?.sub(x)?;
    let dy = x.shift(0, 1, Pad::Replicate)?.sub(x)?;
    unit_vectors(dx, dy, TAU)
}

fn hw(op: &'static str, x: &[usize], mask: &Mask) -> Result<(usize, usize, usize)> {
    let c = mask.check_image(op, x)?;
    if c == 0 {
        return Err(Error::invalid(op, "image has no channels"));
    }
    Ok((mask.height(), mask.width(), c))
}

/// `(1 / HW) * || (a - b) * (1 - M) ||^2`.
pub fn masked_mse<'t>(a: Var<'t>, b: Var<'t>, mask: &Mask) -> Result<Var<'t>> {
    let shape = a.shape();
    if shape != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_mse",
            left: shape,
            right: b.shape(),
        });
    }
    let (h, w, c) = hw("masked_mse", &shape, mask)?;
    let keep = a.constant(mask.keep_weights(c));
    Ok(a.sub(b)?.mul(keep)?.square().sum().scale(1.0 / (h * w) as f64))
}

/// Channel average of `(1 / HW) * || Dx I * Dx(1 - M) + Dy I * Dy(1 - M) ||^2`.
pub fn alignment_loss<'t>(image: Var<'t>, mask: &Mask) -> Result<Var<'t>> {
    let shape = image.shape();
    let (h, w, c) = hw("alignment_loss", &shape, mask)?;
    let keep = image.constant(mask.keep_weights(c));
    let (mx, my) = normalized_gradient_var(keep)?;
    let (ix, iy) = normalized_gradient_var(image)?;
    let dot = ix.mul(mx)?.add(iy.mul(my)?)?;
    Ok(dot.square().sum().scale(1.0 / (h * w * c) as f64))
}

pub fn masked_mse_value(a: &Tensor, b: &Tensor, mask: &Mask) -> Result<f64> {
    let tape = Tape::no_grad();
    masked_mse(tape.constant(a.clone()), tape.constant(b.clone()), mask)?.item()
}

pub fn alignment_loss_value(image: &Tensor, mask: &Mask) -> Result<f64> {
    let tape = Tape::no_grad();
    alignment_loss(tape.constant(image.clone()), mask)?.item()
}

/// `M * inside + (1 - M) * outside`, as an exact per-pixel selection.
pub fn collage<'t>(inside: Var<'t>, outside: Var<'t>, mask: &Mask) -> Result<Var<'t>> {
    let c = mask.check_image("collage", &inside.shape())?;
    select(&mask.expand(c), inside, outside)
}

pub fn collage_value(inside: &Tensor, outside: &Tensor, mask: &Mask) -> Result<Tensor> {
    let tape = Tape::no_grad();
    Ok(collage(tape.constant(inside.clone()), tape.constant(outside.clone()), mask)?.value())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub mse: f64,
    pub align: f64,
    pub lambda_al: f64,
}

/// Loss terms still on the tape.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub mse: Var<'t>,
    /// `None` while the alignment term is inactive.
    pub align: Option<Var<'t>>,
    pub lambda_al: f64,
}

impl LossTerms<'_> {
    pub fn report(&self) -> Result<LossReport> {
        Ok(LossReport {
            total: self.total.item()?,
            mse: self.mse.item()?,
            align: match self.align {
                Some(a) => a.item()?,
                None => 0.0,
            },
            lambda_al: self.lambda_al,
        })
    }
}

/// `mse(x0_hat, target) + lambda_al * align`, with the alignment term
/// evaluated on `loss_target` and only when `align_active`.
pub fn total_loss<'t>(
    target: Var<'t>,
    x0_hat: Var<'t>,
    mask: &Mask,
    lambda_al: f64,
    align_active: bool,
    loss_target: LossTarget,
) -> Result<LossTerms<'t>> {
    if !(lambda_al >= 0.0 && lambda_al.is_finite()) {
        return Err(Error::invalid("total_loss", format!("lambda_al = {lambda_al}")));
    }
    let mse = masked_mse(x0_hat, target, mask)?;
    let align = if align_active {
        let image = match loss_target {
            LossTarget::Collage => collage(x0_hat, target, mask)?,
            LossTarget::RawX0Hat => x0_hat,
        };
        Some(alignment_loss(image, mask)?)
    } else {
        None
    };
    let total = match align {
        Some(a) if lambda_al > 0.0 => mse.add(a.scale(lambda_al))?,
        _ => mse,
    };
    Ok(LossTerms {
        total,
        mse,
        align,
        lambda_al,
    })
}
