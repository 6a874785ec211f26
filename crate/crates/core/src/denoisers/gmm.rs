use rand::Rng;

use super::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{stack, Tensor, Var};

/// Isotropic Gaussian mixture `sum_k w_k N(mu_k, s^2 I)` over image-shaped
/// tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<Tensor>,
    std: f64,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Tensor>, std: f64) -> Result<Self> {
        const OP: &str = "GmmPrior::new";
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::invalid(
                OP,
                format!("{} weights for {} means", weights.len(), means.len()),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid(OP, "weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(OP, format!("weights sum to {total}")));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::invalid(OP, format!("std must be positive, got {std}")));
        }
        let shape = means[0].shape();
        if let Some(bad) = means.iter().find(|m| m.shape() != shape) {
            return Err(Error::ShapeMismatch {
                op: OP,
                left: shape.to_vec(),
                right: bad.shape().to_vec(),
            });
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid(OP, "means must be finite"));
        }
        Ok(Self { weights, means, std })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Tensor] {
        &self.means
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn shape(&self) -> &[usize] {
        self.means[0].shape()
    }

    pub fn dim(&self) -> usize {
        self.means[0].numel()
    }

    /// The single-component prior `{mu_k, s}` with weight 1.
    pub fn component(&self, k: usize) -> Result<GmmPrior> {
        let mean = self
            .means
            .get(k)
            .ok_or_else(|| Error::invalid("GmmPrior::component", format!("component {k} of {}", self.components())))?;
        GmmPrior::new(vec![1.0], vec![mean.clone()], self.std)
    }

    /// Draws a component index and a sample from it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Tensor) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let noise = Tensor::randn(self.shape(), rng);
        let s = self.std;
        let x = self.means[k]
            .zip_map(&noise, |m, n| m + s * n)
            .expect("component shapes agree");
        (k, x)
    }

    /// Variance of each coordinate of the noised marginal at `alpha_bar`.
    pub fn marginal_variance(&self, alpha_bar: f64) -> f64 {
        alpha_bar * self.std * self.std + 1.0 - alpha_bar
    }

    /// `log p(x)` of the noised marginal
    /// `sum_k w_k N(sqrt(ab) mu_k, (ab s^2 + 1 - ab) I)`.
    pub fn log_marginal(&self, x: &Tensor, alpha_bar: f64) -> Result<f64> {
        if x.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                op: "GmmPrior::log_marginal",
                left: self.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        let var = self.marginal_variance(alpha_bar);
        let scale = alpha_bar.sqrt();
        let d = self.dim() as f64;
        let norm = -0.5 * d * (2.0 * std::f64::consts::PI * var).ln();
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| {
                let sq: f64 = x
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(xv, mv)| (xv - scale * mv).powi(2))
                    .sum();
                w.ln() - sq / (2.0 * var) + norm
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln())
    }
}

/// Exact noise prediction `-sqrt(1 - ab_t) * grad log p_t(x_t)` of a
/// Gaussian-mixture prior, evaluated on the tape of `x_t`.
///
/// With `cond = Some(k)` the mixture is restricted to component `k`.
pub fn gmm_eps<'t>(
    prior: &GmmPrior,
    x_t: Var<'t>,
    t: usize,
    s: &NoiseSchedule,
    cond: Option<usize>,
) -> Result<Var<'t>> {
    if t == 0 || t > s.steps() {
        return Err(Error::invalid("gmm_eps", format!("step {t} outside 1..={}", s.steps())));
    }
    match cond {
        Some(k) => gmm_eps_at(&prior.component(k)?, x_t, s.alpha_bar(t)),
        None => gmm_eps_at(prior, x_t, s.alpha_bar(t)),
    }
}

/// [`gmm_eps`] for an explicit `alpha_bar`.
pub(crate) fn gmm_eps_at<'t>(prior: &GmmPrior, x_t: Var<'t>, alpha_bar: f64) -> Result<Var<'t>> {
    let shape = x_t.shape();
    if shape != prior.shape() {
        return Err(Error::ShapeMismatch {
            op: "gmm_eps",
            left: prior.shape().to_vec(),
            right: shape,
        });
    }
    let var = prior.marginal_variance(alpha_bar);
    if var.is_nan() || var < 1e-12 {
        return Err(Error::invalid("gmm_eps", format!("degenerate marginal variance {var}")));
    }
    let scale = alpha_bar.sqrt();
    let centers: Vec<Tensor> = prior.means.iter().map(|m| m.map(|v| scale * v)).collect();

    // responsibilities r_k = softmax_k(log w_k - |x - c_k|^2 / 2v)
    let mut sq = Vec::with_capacity(centers.len());
    for c in &centers {
        sq.push(x_t.sub(x_t.constant(c.clone()))?.square().sum());
    }
    let log_w = Tensor::from_slice(&prior.weights.iter().map(|w| w.ln()).collect::<Vec<_>>());
    let logits = stack(&sq)?.scale(-0.5 / var).add(x_t.constant(log_w))?;
    let lse = logits.logsumexp(0)?;
    let resp = logits.sub(lse)?.exp();

    // posterior mean of the centre, sum_k r_k c_k, as C^T r
    let (k, d) = (centers.len(), prior.dim());
    let mut ct = vec![0.0; d * k];
    for (j, c) in centers.iter().enumerate() {
        for (i, v) in c.data().iter().enumerate() {
            ct[i * k + j] = *v;
        }
    }
    let ct = x_t.constant(Tensor::from_parts(vec![d, k], ct));
    let centre = ct.matvec(resp)?.reshape(&shape)?;
    Ok(x_t.sub(centre)?.scale((1.0 - alpha_bar).sqrt() / var))
}

/// Exact denoiser backed by a [`GmmPrior`], optionally restricted to one
/// component (the class-conditional analogue).
#[derive(Clone, Debug)]
pub struct GmmDenoiser {
    pub prior: GmmPrior,
    pub cond: Option<usize>,
}

impl GmmDenoiser {
    pub fn new(prior: GmmPrior) -> Self {
        Self { prior, cond: None }
    }

    pub fn conditioned(prior: GmmPrior, k: usize) -> Result<Self> {
        prior.component(k)?;
        Ok(Self { prior, cond: Some(k) })
    }
}

impl Denoiser for GmmDenoiser {
    fn eps<'t>(&self, x_t: Var<'t>, t: usize, schedule: &NoiseSchedule) -> Result<Var<'t>> {
        gmm_eps(&self.prior, x_t, t, schedule, self.cond)
    }
}
