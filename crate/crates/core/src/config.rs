//! Experiment configuration: one JSON document with a `version` field.
//! Unknown keys are rejected at every level.
//!
//! ```json
//! {
//!   "version": 1,
//!   "task": {
//!     "height": 16, "width": 16,
//!     "prior": { "kind": "preset", "preset": "smooth4", "std": 0.05 },
//!     "denoiser": { "kind": "exact" }
//!   },
//!   "mask": { "kind": "thick" },
//!   "methods": [
//!     { "method": "combine-image" },
//!     { "method": "gradpaint", "label": "gradpaint-mse", "lambda_al": 0.0 }
//!   ],
//!   "guidance": { "learning_rate": 0.5 },
//!   "runs": 100,
//!   "output_dir": "out/eval",
//!   "seed": 7
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoisers::{ConvDenoiser, Denoiser, GmmDenoiser, GmmPrior};
use crate::error::{Error, Result};
use crate::losses::LossTarget;
use crate::masks::MaskKind;
use crate::priors::{preset_prior, Preset};
use crate::samplers::{GuidanceConfig, Method};
use crate::tensor::Tensor;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorSpec {
    Preset {
        preset: Preset,
        std: f64,
    },
    /// Explicit mixture; each mean is `height * width * channels` values in
    /// row-major order.
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        std: f64,
        #[serde(default = "one")]
        channels: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DenoiserSpec {
    /// Exact noise prediction of the prior.
    #[default]
    Exact,
    /// A trained model, given by the path of its manifest.
    Trained { manifest: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub height: usize,
    pub width: usize,
    pub prior: PriorSpec,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
}

impl TaskConfig {
    pub fn build_prior(&self) -> Result<GmmPrior> {
        match &self.prior {
            PriorSpec::Preset { preset, std } => preset_prior(*preset, self.height, self.width, *std),
            PriorSpec::Mixture {
                weights,
                means,
                std,
                channels,
            } => {
                let shape = vec![self.height, self.width, *channels];
                let means = means
                    .iter()
                    .map(|m| Tensor::new(shape.clone(), m.clone()))
                    .collect::<Result<Vec<_>>>()?;
                GmmPrior::new(weights.clone(), means, *std)
            }
        }
    }

    /// The noise estimator; relative model paths resolve against `base`.
    pub fn build_denoiser(&self, prior: &GmmPrior, base: &Path) -> Result<Box<dyn Denoiser>> {
        match &self.denoiser {
            DenoiserSpec::Exact => Ok(Box::new(GmmDenoiser::new(prior.clone()))),
            DenoiserSpec::Trained { manifest } => {
                let model = ConvDenoiser::load(base.join(manifest))?;
                let c = model.config();
                if [c.height, c.width, c.channels] != prior.shape() {
                    return Err(Error::Config(format!(
                        "model expects {}x{}x{} images, task has {:?}",
                        c.height,
                        c.width,
                        c.channels,
                        prior.shape()
                    )));
                }
                Ok(Box::new(model))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    /// Mask filled with the mid-grey value 0.
    Greyfill,
    /// The ground-truth image.
    Copy,
    CombineImage,
    CombineNoisy,
    #[serde(rename = "gradpaint")]
    GradPaint,
    #[serde(rename = "gradpaint-fast")]
    GradPaintFast,
}

impl MethodKind {
    pub fn sampler(&self) -> Option<Method> {
        match self {
            MethodKind::Greyfill | MethodKind::Copy => None,
            MethodKind::CombineImage => Some(Method::CombineImage),
            MethodKind::CombineNoisy => Some(Method::CombineNoisy),
            MethodKind::GradPaint => Some(Method::GradPaint),
            MethodKind::GradPaintFast => Some(Method::GradPaintFast),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Greyfill => "greyfill",
            MethodKind::Copy => "copy",
            MethodKind::CombineImage => "combine-image",
            MethodKind::CombineNoisy => "combine-noisy",
            MethodKind::GradPaint => "gradpaint",
            MethodKind::GradPaintFast => "gradpaint-fast",
        }
    }
}

/// A method plus per-method overrides of the shared guidance settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: MethodKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_al: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align_active_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_stop_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_target: Option<LossTarget>,
}

impl MethodSpec {
    pub fn new(method: MethodKind) -> Self {
        Self {
            method,
            label: None,
            lambda_al: None,
            learning_rate: None,
            align_active_fraction: None,
            grad_stop_fraction: None,
            loss_target: None,
        }
    }

    pub fn labelled(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(self.method.name())
    }

    pub fn apply(&self, base: &GuidanceConfig) -> GuidanceConfig {
        GuidanceConfig {
            lambda_al: self.lambda_al.unwrap_or(base.lambda_al),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            align_active_fraction: self.align_active_fraction.unwrap_or(base.align_active_fraction),
            grad_stop_fraction: self.grad_stop_fraction.unwrap_or(base.grad_stop_fraction),
            loss_target: self.loss_target.unwrap_or(base.loss_target),
            ..*base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub task: TaskConfig,
    pub mask: MaskKind,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    pub runs: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Also write per-chain wall-clock times to `timing.csv`; off by
    /// default because timings are not reproducible.
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Checks everything that can be checked without running: non-empty
    /// method list, unique labels, valid guidance, a valid prior and an
    /// existing model file. `base` resolves relative model paths.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        let mut labels: Vec<&str> = self.methods.iter().map(|m| m.label()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate method label {:?}", w[0])));
        }
        for m in &self.methods {
            if let Some(s) = m.method.sampler() {
                s.effective_config(&m.apply(&self.guidance))
                    .validate()
                    .map_err(|e| Error::Config(format!("method {:?}: {e}", m.label())))?;
            }
        }
        self.task.build_prior()?;
        if let DenoiserSpec::Trained { manifest } = &self.task.denoiser {
            let path = base.join(manifest);
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "model manifest {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"{
        "version": 1,
        "task": {
            "height": 16, "width": 16,
            "prior": { "kind": "preset", "preset": "smooth4", "std": 0.05 },
            "denoiser": { "kind": "exact" }
        },
        "mask": { "kind": "thick" },
        "methods": [
            { "method": "combine-image" },
            { "method": "gradpaint", "label": "gradpaint-mse", "lambda_al": 0.0 }
        ],
        "guidance": { "learning_rate": 0.5 },
        "runs": 100,
        "output_dir": "out/eval",
        "seed": 7
    }"#;

    #[test]
    fn example_parses_with_defaults() {
        let cfg = ExperimentConfig::from_json(EXAMPLE).unwrap();
        assert_eq!(cfg.guidance.learning_rate, 0.5);
        assert_eq!(cfg.guidance.lambda_al, 400.0);
        assert_eq!(cfg.methods[1].label(), "gradpaint-mse");
        assert_eq!(cfg.methods[1].apply(&cfg.guidance).lambda_al, 0.0);
        assert!(!cfg.record_timing);
        cfg.validate(Path::new(".")).unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = ExperimentConfig::from_json(EXAMPLE).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.to_json().unwrap(), again.to_json().unwrap());
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        let extra = EXAMPLE.replace("\"runs\": 100", "\"runs\": 100, \"colour\": 3");
        assert!(ExperimentConfig::from_json(&extra).is_err());
        let nested = EXAMPLE.replace("\"learning_rate\": 0.5", "\"learning_rate\": 0.5, \"lr\": 1");
        assert!(ExperimentConfig::from_json(&nested).is_err());
        let v2 = EXAMPLE.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(ExperimentConfig::from_json(&v2), Err(Error::Config(_))));
    }

    #[test]
    fn validation_catches_semantic_errors() {
        let mut cfg = ExperimentConfig::from_json(EXAMPLE).unwrap();
        cfg.methods.clear();
        assert!(cfg.validate(Path::new(".")).is_err());
        let mut cfg = ExperimentConfig::from_json(EXAMPLE).unwrap();
        cfg.methods[1].label = None;
        cfg.methods[0] = MethodSpec::new(MethodKind::GradPaint);
        assert!(cfg.validate(Path::new(".")).is_err());
        let mut cfg = ExperimentConfig::from_json(EXAMPLE).unwrap();
        cfg.task.denoiser = DenoiserSpec::Trained {
            manifest: "does/not/exist.json".into(),
        };
        assert!(cfg.validate(Path::new(".")).is_err());
        let mut cfg = ExperimentConfig::from_json(EXAMPLE).unwrap();
        cfg.methods[0].grad_stop_fraction = Some(2.0);
        cfg.methods[0].method = MethodKind::GradPaint;
        assert!(cfg.validate(Path::new(".")).is_err());
    }

    #[test]
    fn explicit_mixture_prior() {
        let mut cfg = ExperimentConfig::from_json(EXAMPLE).unwrap();
        cfg.task.height = 1;
        cfg.task.width = 2;
        cfg.task.prior = PriorSpec::Mixture {
            weights: vec![0.25, 0.75],
            means: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            std: 0.1,
            channels: 1,
        };
        let p = cfg.task.build_prior().unwrap();
        assert_eq!(p.shape(), &[1, 2, 1]);
        cfg.task.prior = PriorSpec::Mixture {
            weights: vec![1.0],
            means: vec![vec![0.0]],
            std: 0.1,
            channels: 1,
        };
        assert!(cfg.task.build_prior().is_err());
    }
}
