//! Reverse-diffusion samplers: unconditional DDPM and the three inpainting
//! strategies.
//!
//! Step progress after `k` completed steps is `k / T`; the step that maps
//! `x_t` to `x_{t-1}` has `k = T - t`. The alignment term is active while
//! progress is below `align_active_fraction`, and gradient guidance runs
//! while progress is below `grad_stop_fraction`.
//!
//! Randomness: `x_T` and the posterior noise `z` come from the chain stream
//! of `rng_seed`, and the re-noised copies used by combine-noisy from a
//! separate stream, so every method sees the same `x_T` and `z` sequence.
//! The final step (`t = 1`) draws no noise.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::denoisers::Denoiser;
use crate::error::{Error, Result};
use crate::losses::{collage, total_loss, LossReport, LossTarget, DEFAULT_LAMBDA_AL};
use crate::masks::Mask;
use crate::rng::{rng_for, stream, ChainRng};
use crate::schedule::{ddpm_posterior_step, estimate_x0, NoiseSchedule};
use crate::tensor::{Tape, Tensor, Var};

pub const FAST_GRAD_STOP_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub steps: usize,
    pub lambda_al: f64,
    pub learning_rate: f64,
    pub align_active_fraction: f64,
    pub grad_stop_fraction: f64,
    pub loss_target: LossTarget,
    pub rng_seed: u64,
    /// Keep the `x0_hat` collage every this many steps; 0 disables.
    pub snapshot_every: usize,
    /// Record separate gradient norms of the two loss terms (two extra
    /// backward passes per guided step).
    pub telemetry: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lambda_al: DEFAULT_LAMBDA_AL,
            learning_rate: 0.005,
            align_active_fraction: 0.45,
            grad_stop_fraction: 1.0,
            loss_target: LossTarget::Collage,
            rng_seed: 0,
            snapshot_every: 0,
            telemetry: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("GuidanceConfig", msg));
        for (name, f) in [
            ("align_active_fraction", self.align_active_fraction),
            ("grad_stop_fraction", self.grad_stop_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} = {f} outside [0, 1]"));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {}", self.learning_rate));
        }
        if !(self.lambda_al >= 0.0 && self.lambda_al.is_finite()) {
            return bad(format!("lambda_al = {}", self.lambda_al));
        }
        if self.steps < 2 {
            return bad(format!("steps = {} (need at least 2)", self.steps));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    CombineImage,
    CombineNoisy,
    GradPaint,
    GradPaintFast,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::CombineImage,
        Method::CombineNoisy,
        Method::GradPaint,
        Method::GradPaintFast,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::CombineImage => "combine-image",
            Method::CombineNoisy => "combine-noisy",
            Method::GradPaint => "gradpaint",
            Method::GradPaintFast => "gradpaint-fast",
        }
    }

    /// The configuration the method actually runs with.
    pub fn effective_config(&self, cfg: &GuidanceConfig) -> GuidanceConfig {
        match self {
            Method::GradPaintFast => GuidanceConfig {
                grad_stop_fraction: FAST_GRAD_STOP_FRACTION,
                ..*cfg
            },
            _ => *cfg,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("Method", format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Completed steps before this one, `T - t`.
    pub step: usize,
    pub t: usize,
    /// Present on guided steps.
    pub loss: Option<LossReport>,
    /// `|grad L|` with respect to `x_t`; 0 on unguided steps.
    pub grad_norm: f64,
    pub grad_norm_mse: Option<f64>,
    /// Norm of the gradient of `lambda_al * L_al`.
    pub grad_norm_align: Option<f64>,
    pub update_applied: bool,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ChainTrace {
    pub records: Vec<StepRecord>,
    /// `(t, x0_hat collage)` pairs.
    pub snapshots: Vec<(usize, Tensor)>,
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    t: usize,
    mse: Option<f64>,
    align: Option<f64>,
    total: Option<f64>,
    lambda_al: Option<f64>,
    grad_norm: f64,
    grad_norm_mse: Option<f64>,
    grad_norm_align: Option<f64>,
    update_applied: bool,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Equality of everything except wall-clock times.
    pub fn same_run(&self, other: &ChainTrace) -> bool {
        self.snapshots == other.snapshots
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                StepRecord {
                    wall_clock_s: 0.0,
                    ..a.clone()
                } == StepRecord {
                    wall_clock_s: 0.0,
                    ..b.clone()
                }
            })
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.wall_clock_s).sum()
    }

    /// One row per step; empty cells where a quantity was not computed.
    /// Timing is left out so the file is reproducible.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(TraceRow {
                step: r.step,
                t: r.t,
                mse: r.loss.map(|l| l.mse),
                align: r.loss.map(|l| l.align),
                total: r.loss.map(|l| l.total),
                lambda_al: r.loss.map(|l| l.lambda_al),
                grad_norm: r.grad_norm,
                grad_norm_mse: r.grad_norm_mse,
                grad_norm_align: r.grad_norm_align,
                update_applied: r.update_applied,
            })?;
        }
        if self.records.is_empty() {
            w.write_record([
                "step",
                "t",
                "mse",
                "align",
                "total",
                "lambda_al",
                "grad_norm",
                "grad_norm_mse",
                "grad_norm_align",
                "update_applied",
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn check_finite(x: &Tensor, what: &str) -> Result<(), String> {
    match x.first_non_finite() {
        Some(i) => Err(format!("non-finite {what} at index {i}")),
        None => Ok(()),
    }
}

fn noise(shape: &[usize], t: usize, rng: &mut ChainRng) -> Option<Tensor> {
    (t > 1).then(|| Tensor::randn(shape, rng))
}

/// One unguided DDPM step.
pub fn unconditional_step<D: Denoiser + ?Sized>(
    x_t: &Tensor,
    denoiser: &D,
    t: usize,
    s: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let x = tape.constant(x_t.clone());
    let x0 = estimate_x0(x, denoiser.eps(x, t, s)?, t, s)?;
    Ok(ddpm_posterior_step(x, x0, t, s, z)?.value())
}

pub fn sample_unconditional<D: Denoiser + ?Sized>(
    denoiser: &D,
    s: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor> {
    let mut rng = rng_for(seed, &[stream::CHAIN]);
    let mut x = Tensor::randn(shape, &mut rng);
    for t in (1..=s.steps()).rev() {
        let z = noise(shape, t, &mut rng);
        x = unconditional_step(&x, denoiser, t, s, z.as_ref())?;
        if let Err(reason) = check_finite(&x, "sample") {
            return Err(Error::ChainAborted {
                step: s.steps() - t,
                t,
                reason,
                trace: Box::default(),
            });
        }
    }
    Ok(x)
}

/// Posterior step with the collage `M * x0_hat + (1 - M) * image` in place
/// of `x0_hat`. Returns `(x_{t-1}, collage)`.
fn combine_image_var<'t>(
    x_t: Var<'t>,
    x0_hat: Var<'t>,
    image: &Tensor,
    mask: &Mask,
    t: usize,
    s: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<(Var<'t>, Var<'t>)> {
    let merged = collage(x0_hat, x_t.constant(image.clone()), mask)?;
    Ok((ddpm_posterior_step(x_t, merged, t, s, z)?, merged))
}

fn check_pair(op: &'static str, x_t: &Tensor, image: &Tensor, mask: &Mask) -> Result<()> {
    mask.check_image(op, image.shape())?;
    if x_t.shape() != image.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: x_t.shape().to_vec(),
            right: image.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn combine_image_step<D: Denoiser + ?Sized>(
    x_t: &Tensor,
    denoiser: &D,
    image: &Tensor,
    mask: &Mask,
    t: usize,
    s: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    Ok(combine_image_full(x_t, denoiser, image, mask, t, s, z)?.0)
}

fn combine_image_full<D: Denoiser + ?Sized>(
    x_t: &Tensor,
    denoiser: &D,
    image: &Tensor,
    mask: &Mask,
    t: usize,
    s: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    check_pair("combine_image_step", x_t, image, mask)?;
    let tape = Tape::no_grad();
    let x = tape.constant(x_t.clone());
    let x0 = estimate_x0(x, denoiser.eps(x, t, s)?, t, s)?;
    let (next, merged) = combine_image_var(x, x0, image, mask, t, s, z)?;
    Ok((next.value(), merged.value()))
}

/// Unguided step whose unmasked region is then replaced by the image noised
/// to level `t - 1` with `eps_prime`.
#[allow(clippy::too_many_arguments)]
pub fn combine_noisy_step<D: Denoiser + ?Sized>(
    x_t: &Tensor,
    denoiser: &D,
    image: &Tensor,
    mask: &Mask,
    t: usize,
    s: &NoiseSchedule,
    z: Option<&Tensor>,
    eps_prime: &Tensor,
) -> Result<Tensor> {
    Ok(combine_noisy_full(x_t, denoiser, image, mask, t, s, z, eps_prime)?.0)
}

#[allow(clippy::too_many_arguments)]
fn combine_noisy_full<D: Denoiser + ?Sized>(
    x_t: &Tensor,
    denoiser: &D,
    image: &Tensor,
    mask: &Mask,
    t: usize,
    s: &NoiseSchedule,
    z: Option<&Tensor>,
    eps_prime: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_pair("combine_noisy_step", x_t, image, mask)?;
    if eps_prime.shape() != image.shape() {
        return Err(Error::ShapeMismatch {
            op: "combine_noisy_step",
            left: image.shape().to_vec(),
            right: eps_prime.shape().to_vec(),
        });
    }
    let tape = Tape::no_grad();
    let x = tape.constant(x_t.clone());
    let x0 = estimate_x0(x, denoiser.eps(x, t, s)?, t, s)?;
    let prev = ddpm_posterior_step(x, x0, t, s, z)?;
    let known = tape.constant(s.mix(image, eps_prime, t - 1)?);
    let merged = collage(x0, tape.constant(image.clone()), mask)?;
    Ok((collage(prev, known, mask)?.value(), merged.value()))
}

/// Result of one GradPaint step.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPaintStep {
    pub x_prev: Tensor,
    pub collage: Tensor,
    pub loss: Option<LossReport>,
    pub grad_norm: f64,
    pub grad_norm_mse: Option<f64>,
    pub grad_norm_align: Option<f64>,
    pub update_applied: bool,
}

/// Whether the guided machinery and the alignment term run at step `t`.
pub fn guidance_window(cfg: &GuidanceConfig, t: usize, steps: usize) -> (bool, bool) {
    let progress = (steps - t) as f64 / steps as f64;
    (progress < cfg.grad_stop_fraction, progress < cfg.align_active_fraction)
}

/// Combine-image step followed by `x_{t-1} -= lr * g / |g|` with
/// `g = grad_{x_t} L` backpropagated through the denoiser.
#[allow(clippy::too_many_arguments)]
pub fn gradpaint_step<D: Denoiser + ?Sized>(
    x_t: &Tensor,
    denoiser: &D,
    image: &Tensor,
    mask: &Mask,
    t: usize,
    s: &NoiseSchedule,
    z: Option<&Tensor>,
    cfg: &GuidanceConfig,
) -> Result<GradPaintStep> {
    let (guided, align_active) = guidance_window(cfg, t, s.steps());
    if !guided {
        let (x_prev, merged) = combine_image_full(x_t, denoiser, image, mask, t, s, z)?;
        return Ok(GradPaintStep {
            x_prev,
            collage: merged,
            loss: None,
            grad_norm: 0.0,
            grad_norm_mse: None,
            grad_norm_align: None,
            update_applied: false,
        });
    }
    check_pair("gradpaint_step", x_t, image, mask)?;
    let tape = Tape::new();
    let x = tape.leaf(x_t.clone());
    let x0 = estimate_x0(x, denoiser.eps(x, t, s)?, t, s)?;
    let target = tape.constant(image.clone());
    let terms = total_loss(target, x0, mask, cfg.lambda_al, align_active, cfg.loss_target)?;
    let report = terms.report()?;
    let grad_of = |root: Var<'_>| -> Result<Tensor> {
        let grads = root.backward()?;
        Ok(grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x_t.shape())))
    };
    let g = grad_of(terms.total)?;
    let (grad_norm_mse, grad_norm_align) = if cfg.telemetry {
        let mse = grad_of(terms.mse)?.norm2();
        let align = match terms.align {
            Some(a) => Some(grad_of(a)?.norm2() * cfg.lambda_al),
            None => None,
        };
        (Some(mse), align)
    } else {
        (None, None)
    };
    let (next, merged) = combine_image_var(x, x0, image, mask, t, s, z)?;
    let mut x_prev = next.value();
    let norm = g.norm2();
    if !norm.is_finite() || g.first_non_finite().is_some() {
        return Err(Error::NonFiniteLoss {
            step: s.steps() - t,
            loss: report.total,
        });
    }
    let update_applied = norm > 0.0 && cfg.learning_rate > 0.0;
    if update_applied {
        let c = cfg.learning_rate / norm;
        for (v, gi) in x_prev.data_mut().iter_mut().zip(g.data()) {
            *v -= c * gi;
        }
    }
    Ok(GradPaintStep {
        x_prev,
        collage: merged.value(),
        loss: Some(report),
        grad_norm: norm,
        grad_norm_mse,
        grad_norm_align,
        update_applied,
    })
}

/// Runs a full inpainting chain and applies the terminal collage, so the
/// output equals `image` bit-exactly wherever `mask` is 0.
///
/// On a numerical failure the returned [`Error::ChainAborted`] carries the
/// records of the completed steps.
pub fn inpaint<D: Denoiser + ?Sized>(
    method: Method,
    denoiser: &D,
    image: &Tensor,
    mask: &Mask,
    schedule: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<(Tensor, ChainTrace)> {
    let cfg = method.effective_config(cfg);
    cfg.validate()?;
    mask.check_image("inpaint", image.shape())?;
    if let Err(reason) = check_finite(image, "input image") {
        return Err(Error::invalid("inpaint", reason));
    }
    let shape = image.shape().to_vec();
    let steps = schedule.steps();
    let mut chain = rng_for(cfg.rng_seed, &[stream::CHAIN]);
    let mut renoise = rng_for(cfg.rng_seed, &[stream::RENOISE]);
    let mut x = Tensor::randn(&shape, &mut chain);
    let mut trace = ChainTrace::default();
    for t in (1..=steps).rev() {
        let step = steps - t;
        let started = Instant::now();
        let z = noise(&shape, t, &mut chain);
        let abort = |trace: ChainTrace, reason: String| Error::ChainAborted {
            step,
            t,
            reason,
            trace: Box::new(trace),
        };
        let mut record = StepRecord {
            step,
            t,
            loss: None,
            grad_norm: 0.0,
            grad_norm_mse: None,
            grad_norm_align: None,
            update_applied: false,
            wall_clock_s: 0.0,
        };
        let outcome = match method {
            Method::CombineImage => combine_image_full(&x, denoiser, image, mask, t, schedule, z.as_ref()),
            Method::CombineNoisy => {
                let eps_prime = Tensor::randn(&shape, &mut renoise);
                combine_noisy_full(&x, denoiser, image, mask, t, schedule, z.as_ref(), &eps_prime)
            }
            Method::GradPaint | Method::GradPaintFast => {
                gradpaint_step(&x, denoiser, image, mask, t, schedule, z.as_ref(), &cfg).map(|g| {
                    record.loss = g.loss;
                    record.grad_norm = g.grad_norm;
                    record.grad_norm_mse = g.grad_norm_mse;
                    record.grad_norm_align = g.grad_norm_align;
                    record.update_applied = g.update_applied;
                    (g.x_prev, g.collage)
                })
            }
        };
        let (next, merged) = match outcome {
            Ok(v) => v,
            Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFinite { .. })) => {
                return Err(abort(trace, e.to_string()))
            }
            Err(e) => return Err(e),
        };
        if let Err(reason) = check_finite(&next, "x_{t-1}") {
            return Err(abort(trace, reason));
        }
        x = next;
        if cfg.snapshot_every > 0 && step.is_multiple_of(cfg.snapshot_every) {
            trace.snapshots.push((t, merged));
        }
        record.wall_clock_s = started.elapsed().as_secs_f64();
        trace.records.push(record);
    }
    let tape = Tape::no_grad();
    let out = collage(tape.constant(x), tape.constant(image.clone()), mask)?.value();
    Ok((out, trace))
}
