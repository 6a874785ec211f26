//! Structured Gaussian-mixture priors for desk-scale experiments.
//!
//! Component means are smooth greyscale patterns with amplitude 0.8:
//! horizontal and vertical ramps, a soft half-plane and a centred blob.

use serde::{Deserialize, Serialize};

use crate::denoisers::GmmPrior;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AMPLITUDE: f64 = 0.8;
pub const DEFAULT_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    RampX,
    RampY,
    /// Negated horizontal ramp.
    RampXNeg,
    HalfPlane,
    Blob,
}

impl Pattern {
    pub fn render(&self, height: usize, width: usize) -> Tensor {
        let norm = |k: usize, n: usize| {
            if n > 1 {
                2.0 * k as f64 / (n - 1) as f64 - 1.0
            } else {
                0.0
            }
        };
        let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
        let radius = height.min(width) as f64 / 4.0;
        let data = (0..height)
            .flat_map(|i| (0..width).map(move |j| (i, j)))
            .map(|(i, j)| {
                let v = match self {
                    Pattern::RampX => norm(j, width),
                    Pattern::RampY => norm(i, height),
                    Pattern::RampXNeg => -norm(j, width),
                    Pattern::HalfPlane => ((j as f64 - cx) / 2.0).tanh(),
                    Pattern::Blob => {
                        let r2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                        2.0 * (-r2 / (2.0 * radius * radius)).exp() - 1.0
                    }
                };
                AMPLITUDE * v
            })
            .collect();
        Tensor::from_parts(vec![height, width, 1], data)
    }
}

/// Named preset families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Horizontal and vertical ramps.
    Ramps2,
    /// Both horizontal ramps, the half-plane and the blob.
    Smooth4,
}

impl Preset {
    pub fn patterns(&self) -> &'static [Pattern] {
        match self {
            Preset::Ramps2 => &[Pattern::RampX, Pattern::RampY],
            Preset::Smooth4 => &[Pattern::RampX, Pattern::RampXNeg, Pattern::HalfPlane, Pattern::Blob],
        }
    }
}

/// Equal-weight mixture of the preset's patterns.
pub fn preset_prior(preset: Preset, height: usize, width: usize, std: f64) -> Result<GmmPrior> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("preset_prior", "empty image"));
    }
    let patterns = preset.patterns();
    let k = patterns.len();
    GmmPrior::new(
        vec![1.0 / k as f64; k],
        patterns.iter().map(|p| p.render(height, width)).collect(),
        std,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patterns_are_bounded_and_distinct() {
        let all = [
            Pattern::RampX,
            Pattern::RampY,
            Pattern::RampXNeg,
            Pattern::HalfPlane,
            Pattern::Blob,
        ];
        let rendered: Vec<Tensor> = all.iter().map(|p| p.render(16, 16)).collect();
        for (a, r) in all.iter().zip(&rendered) {
            assert!(r.data().iter().all(|v| v.abs() <= AMPLITUDE), "{a:?}");
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert!(rendered[i].max_abs_diff(&rendered[j]).unwrap() > 0.3);
            }
        }
    }

    #[test]
    fn ramp_endpoints() {
        let r = Pattern::RampX.render(2, 3);
        assert_eq!(r.data(), &[-0.8, 0.0, 0.8, -0.8, 0.0, 0.8]);
    }

    #[test]
    fn presets_have_equal_weights() {
        let p = preset_prior(Preset::Smooth4, 16, 16, DEFAULT_STD).unwrap();
        assert_eq!(p.components(), 4);
        assert_eq!(p.weights(), &[0.25; 4]);
        assert_eq!(preset_prior(Preset::Ramps2, 8, 8, 0.1).unwrap().components(), 2);
    }
}
