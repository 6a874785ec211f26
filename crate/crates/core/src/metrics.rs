//! Proxy metrics for inpainting quality and the studies built on them.
//!
//! Realism is measured as the exact negative log-likelihood under the known
//! Gaussian-mixture prior, harmonization as the seam energy (the alignment
//! loss of the finished image), and recovery as the RMSE inside the mask.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::denoisers::{Denoiser, GmmPrior};
use crate::error::{Error, Result};
use crate::losses::alignment_loss_value;
use crate::masks::{centered_rect, coverage, Mask};
use crate::rng::derive_seed;
use crate::samplers::{inpaint, GuidanceConfig, Method};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// `-log p(x)` under the clean-data mixture.
pub fn nll_under_prior(prior: &GmmPrior, x: &Tensor) -> Result<f64> {
    Ok(-prior.log_marginal(x, 1.0)?)
}

pub fn seam_energy(x: &Tensor, mask: &Mask) -> Result<f64> {
    alignment_loss_value(x, mask)
}

/// Root mean squared error over masked entries (all channels); 0 for an
/// empty mask.
pub fn masked_rmse(x: &Tensor, truth: &Tensor, mask: &Mask) -> Result<f64> {
    let c = mask.check_image("masked_rmse", x.shape())?;
    let diff = x.zip_map(truth, |a, b| a - b)?;
    let sel = mask.expand(c);
    let (sum, n) = diff
        .data()
        .iter()
        .zip(&sel)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (d, _)| (s + d * d, n + 1));
    Ok(if n == 0 { 0.0 } else { (sum / n as f64).sqrt() })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub method: String,
    pub mask_kind: String,
    pub run: usize,
    pub seed: u64,
    pub nll_prior: f64,
    pub seam_energy: f64,
    pub masked_rmse: f64,
    pub wall_clock_s: f64,
}

impl EvalRecord {
    pub fn evaluate(prior: &GmmPrior, output: &Tensor, truth: &Tensor, mask: &Mask) -> Result<(f64, f64, f64)> {
        let values = (
            nll_under_prior(prior, output)?,
            seam_energy(output, mask)?,
            masked_rmse(output, truth, mask)?,
        );
        for (name, v) in [
            ("nll_prior", values.0),
            ("seam_energy", values.1),
            ("masked_rmse", values.2),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("metric {name}"),
                    index: 0,
                });
            }
        }
        Ok(values)
    }
}

/// Mean per-pixel variance (unbiased, over samples) inside the mask.
///
/// Every channel of every masked pixel counts as one entry; an empty mask
/// gives 0.
pub fn masked_pixel_variance(samples: &[Tensor], mask: &Mask) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid(
            "masked_pixel_variance",
            format!("need at least 2 samples, got {}", samples.len()),
        ));
    }
    let c = mask.check_image("masked_pixel_variance", samples[0].shape())?;
    if let Some(bad) = samples.iter().find(|s| s.shape() != samples[0].shape()) {
        return Err(Error::ShapeMismatch {
            op: "masked_pixel_variance",
            left: samples[0].shape().to_vec(),
            right: bad.shape().to_vec(),
        });
    }
    let sel = mask.expand(c);
    let n = samples.len() as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for (i, _) in sel.iter().enumerate().filter(|(_, &m)| m) {
        let mean = samples.iter().map(|s| s.data()[i]).sum::<f64>() / n;
        total += samples.iter().map(|s| (s.data()[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiversityRow {
    pub method: String,
    pub target_coverage: f64,
    pub coverage: f64,
    pub samples: usize,
    pub variance: f64,
}

/// Pixel variance inside centred rectangular masks of each coverage, over
/// `samples` chains per coverage that differ only in their chain seed.
#[allow(clippy::too_many_arguments)]
pub fn diversity_study<D: Denoiser + ?Sized>(
    method: Method,
    denoiser: &D,
    image: &Tensor,
    coverages: &[f64],
    samples: usize,
    schedule: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<Vec<DiversityRow>> {
    if samples < 2 {
        return Err(Error::invalid(
            "diversity_study",
            format!("need at least 2 samples, got {samples}"),
        ));
    }
    let [h, w, _] = image.shape() else {
        return Err(Error::invalid("diversity_study", "image must be [H, W, C]"));
    };
    let mut rows = Vec::with_capacity(coverages.len());
    for (cell, &target) in coverages.iter().enumerate() {
        let mask = centered_rect(*h, *w, target)?;
        let outputs = (0..samples)
            .into_par_iter()
            .map(|k| {
                let cfg = GuidanceConfig {
                    rng_seed: derive_seed(cfg.rng_seed, &[cell as u64, k as u64]),
                    ..*cfg
                };
                inpaint(method, denoiser, image, &mask, schedule, &cfg).map(|(x, _)| x)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(DiversityRow {
            method: method.to_string(),
            target_coverage: target,
            coverage: coverage(&mask),
            samples,
            variance: masked_pixel_variance(&outputs, &mask)?,
        });
    }
    Ok(rows)
}

/// One masked image to restore.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintTask {
    pub run: usize,
    /// Chain seed shared by every method on this task.
    pub seed: u64,
    pub image: Tensor,
    pub mask: Mask,
    pub mask_kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub grad_stop_fraction: f64,
    pub tasks: usize,
    pub mean_nll_prior: f64,
    pub mean_seam_energy: f64,
    pub mean_masked_rmse: f64,
    pub wall_clock_s: f64,
}

/// GradPaint over `tasks` for each gradient-stop fraction.
///
/// Chains run one after another so that the wall-clock column compares
/// like with like; metric means are summed in task order.
pub fn timing_sweep<D: Denoiser + ?Sized>(
    fractions: &[f64],
    tasks: &[InpaintTask],
    prior: &GmmPrior,
    denoiser: &D,
    schedule: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let mut sums = [0.0; 3];
        let mut elapsed = 0.0;
        for task in tasks {
            let cfg = GuidanceConfig {
                grad_stop_fraction: f,
                rng_seed: task.seed,
                ..*cfg
            };
            let started = Instant::now();
            let (out, _) = inpaint(Method::GradPaint, denoiser, &task.image, &task.mask, schedule, &cfg)?;
            elapsed += started.elapsed().as_secs_f64();
            let (nll, seam, rmse) = EvalRecord::evaluate(prior, &out, &task.image, &task.mask)?;
            sums[0] += nll;
            sums[1] += seam;
            sums[2] += rmse;
        }
        let n = tasks.len().max(1) as f64;
        rows.push(SweepRow {
            grad_stop_fraction: f,
            tasks: tasks.len(),
            mean_nll_prior: sums[0] / n,
            mean_seam_energy: sums[1] / n,
            mean_masked_rmse: sums[2] / n,
            wall_clock_s: elapsed,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::GmmDenoiser;
    use crate::schedule::make_linear_schedule;

    fn gauss(dim: usize, std: f64) -> GmmPrior {
        GmmPrior::new(vec![1.0], vec![Tensor::zeros(&[dim, 1, 1])], std).unwrap()
    }

    #[test]
    fn nll_of_gaussian_at_mean() {
        let p = gauss(6, 0.5);
        let at_mean = nll_under_prior(&p, &Tensor::zeros(&[6, 1, 1])).unwrap();
        let expect = 3.0 * (2.0 * std::f64::consts::PI * 0.25).ln();
        assert!((at_mean - expect).abs() < 1e-12);
        let unit = gauss(6, 1.0);
        let mut e = Tensor::zeros(&[6, 1, 1]);
        e.data_mut()[2] = 1.0;
        let base = nll_under_prior(&unit, &Tensor::zeros(&[6, 1, 1])).unwrap();
        assert!((nll_under_prior(&unit, &e).unwrap() - base - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nll_of_two_far_components_adds_log_two() {
        let a = Tensor::zeros(&[4, 1, 1]);
        let b = Tensor::full(&[4, 1, 1], 50.0);
        let mix = GmmPrior::new(vec![0.5, 0.5], vec![a.clone(), b], 1.0).unwrap();
        let single = gauss(4, 1.0);
        let d = nll_under_prior(&mix, &a).unwrap() - nll_under_prior(&single, &a).unwrap();
        assert!((d - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rmse_and_variance_basics() {
        let m = Mask::from_fn(2, 2, |i, _| i == 0);
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 5.0, 5.0]).unwrap();
        let y = Tensor::new(vec![2, 2, 1], vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(masked_rmse(&x, &y, &m).unwrap(), 1.0);
        assert_eq!(masked_rmse(&x, &y, &Mask::zeros(2, 2)).unwrap(), 0.0);
        let same = vec![x.clone(); 4];
        assert_eq!(masked_pixel_variance(&same, &m).unwrap(), 0.0);
        assert_eq!(masked_pixel_variance(&[x.clone(), y.clone()], &m).unwrap(), 0.5);
        assert_eq!(masked_pixel_variance(&[x.clone(), y], &Mask::zeros(2, 2)).unwrap(), 0.0);
        assert!(masked_pixel_variance(&[x], &m).is_err());
    }

    #[test]
    fn diversity_needs_two_samples_and_handles_empty_masks() {
        let den = GmmDenoiser::new(GmmPrior::new(vec![1.0], vec![Tensor::zeros(&[4, 4, 1])], 0.3).unwrap());
        let s = make_linear_schedule(20).unwrap();
        let img = Tensor::zeros(&[4, 4, 1]);
        let cfg = GuidanceConfig {
            steps: 20,
            ..Default::default()
        };
        assert!(diversity_study(Method::CombineImage, &den, &img, &[0.5], 1, &s, &cfg).is_err());
        let rows = diversity_study(Method::CombineImage, &den, &img, &[0.0, 0.5], 4, &s, &cfg).unwrap();
        assert_eq!(rows[0].variance, 0.0);
        assert!(rows[1].variance > 0.0);
        let again = diversity_study(Method::CombineImage, &den, &img, &[0.0, 0.5], 4, &s, &cfg).unwrap();
        assert_eq!(rows, again);
    }
}
