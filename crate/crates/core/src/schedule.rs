//! Noise schedules and the DDPM estimation / posterior equations.
//!
//! Index convention: `alpha_bar[t]` for `t = 0..=T` with `alpha_bar[0] = 1`;
//! `sigma(t)` is the standard deviation injected by the step `t -> t - 1`.

use crate::error::{Error, Result};
use crate::tensor::{gpt1, Tensor, Var};

/// Smallest `alpha_bar` accepted when dividing by `sqrt(alpha_bar)`.
pub const MIN_ALPHA_BAR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    /// `sigma[t - 1]` is the posterior std of the step `t -> t - 1`.
    sigma: Vec<f64>,
}

/// Linear beta schedule defined directly at `steps` sampling steps.
///
/// Betas run from `1e-4 * 1000 / T` to `0.02 * 1000 / T` so that the total
/// noise matches a 1000-step schedule; the posterior variance is
/// `(1 - ab[t-1]) / (1 - ab[t]) * beta_t`. Step counts whose final
/// `alpha_bar` falls below [`MIN_ALPHA_BAR`] are rejected.
pub fn make_linear_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid(
            "make_linear_schedule",
            format!("need at least 2 steps, got {steps}"),
        ));
    }
    let rescale = 1000.0 / steps as f64;
    let (lo, hi) = (1e-4 * rescale, 0.02 * rescale);
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut prod = 1.0;
    for i in 0..steps {
        let frac = i as f64 / (steps - 1) as f64;
        let beta = (lo + (hi - lo) * frac).clamp(f64::MIN_POSITIVE, 0.999);
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }
    // betas above 1 are clamped; for 5 <= T <= 18 the clamped steps drive
    // alpha_bar below what the x0 estimate can divide by
    if prod < MIN_ALPHA_BAR {
        return Err(Error::invalid(
            "make_linear_schedule",
            format!("{steps} steps collapse alpha_bar_T to {prod:e}, below {MIN_ALPHA_BAR:e}"),
        ));
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

impl NoiseSchedule {
    /// Builds a schedule from `alpha_bar[0..=T]`.
    ///
    /// Requires `alpha_bar[0] == 1`, a non-increasing sequence and
    /// `0 < alpha_bar[t] < 1` for `t >= 1`. Plateaus are allowed.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        const OP: &str = "NoiseSchedule::from_alpha_bar";
        if alpha_bar.len() < 2 {
            return Err(Error::invalid(OP, "need at least one step"));
        }
        if (alpha_bar[0] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(OP, format!("alpha_bar[0] = {}", alpha_bar[0])));
        }
        for (t, w) in alpha_bar.windows(2).enumerate() {
            let (prev, cur) = (w[0], w[1]);
            if !(cur > 0.0 && cur < 1.0 && cur <= prev) {
                return Err(Error::invalid(OP, format!("alpha_bar[{}] = {cur} after {prev}", t + 1)));
            }
        }
        let sigma = (1..alpha_bar.len())
            .map(|t| {
                let (prev, cur) = (alpha_bar[t - 1], alpha_bar[t]);
                let beta = 1.0 - cur / prev;
                ((1.0 - prev) / (1.0 - cur) * beta).max(0.0).sqrt()
            })
            .collect();
        Ok(Self { alpha_bar, sigma })
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.sigma.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Posterior std of the step `t -> t - 1`, for `1 <= t <= T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    fn check_step(&self, op: &'static str, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(op, format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Coefficients `(c0, c1)` of `x0_hat` and `x_t` in the step `t -> t - 1`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step("posterior_coefficients", t)?;
        let (prev, cur) = (self.alpha_bar[t - 1], self.alpha_bar[t]);
        let c0 = (prev - cur) * prev.sqrt() / (prev * (1.0 - cur));
        let c1 = (1.0 - prev) * cur.sqrt() / ((1.0 - cur) * prev.sqrt());
        Ok((c0, c1))
    }

    /// Forward mixing `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
    pub fn mix(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// Serializes as a `[2, T + 1]` tensor: row 0 is `alpha_bar`, row 1 is
    /// `sigma` with a leading 0 for `t = 0`.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.alpha_bar.clone();
        data.push(0.0);
        data.extend_from_slice(&self.sigma);
        Tensor::from_parts(vec![2, self.alpha_bar.len()], data)
    }

    pub fn write_gpt1(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        gpt1::write(path, &self.to_tensor())
    }

    /// Reads the `alpha_bar` row of a serialized schedule; `sigma` is
    /// recomputed from it.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [2, n] = t.shape() else {
            return Err(Error::invalid(
                "NoiseSchedule::from_tensor",
                format!("expected shape [2, T+1], got {:?}", t.shape()),
            ));
        };
        Self::from_alpha_bar(t.data()[..*n].to_vec())
    }
}

/// `x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`, differentiable in
/// both arguments.
pub fn estimate_x0<'t>(x_t: Var<'t>, eps: Var<'t>, t: usize, s: &NoiseSchedule) -> Result<Var<'t>> {
    s.check_step("estimate_x0", t)?;
    estimate_x0_at(x_t, eps, s.alpha_bar(t))
}

/// [`estimate_x0`] for an explicit `alpha_bar` value.
pub fn estimate_x0_at<'t>(x_t: Var<'t>, eps: Var<'t>, alpha_bar: f64) -> Result<Var<'t>> {
    if alpha_bar.is_nan() || alpha_bar < MIN_ALPHA_BAR {
        return Err(Error::invalid(
            "estimate_x0",
            format!("alpha_bar {alpha_bar} below {MIN_ALPHA_BAR}"),
        ));
    }
    let noise = eps.scale((1.0 - alpha_bar).sqrt());
    Ok(x_t.sub(noise)?.scale(1.0 / alpha_bar.sqrt()))
}

/// `x_{t-1} = c0 x0_hat + c1 x_t + sigma_t z`; `z = None` drops the noise
/// term (used for the final step).
pub fn ddpm_posterior_step<'t>(
    x_t: Var<'t>,
    x0_hat: Var<'t>,
    t: usize,
    s: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Var<'t>> {
    let (c0, c1) = s.posterior_coefficients(t)?;
    let mean = x0_hat.scale(c0).add(x_t.scale(c1))?;
    match z {
        Some(z) => {
            let noise = x_t.constant(z.clone()).scale(s.sigma(t));
            mean.add(noise)
        }
        None => Ok(mean),
    }
}
