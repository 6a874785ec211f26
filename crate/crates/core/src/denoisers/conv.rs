//! Small convolutional noise estimator and its training loop.
//!
//! Architecture: four same-size 3x3 convolutions (zero padding) with `hidden`
//! channels and SiLU activations. A sinusoidal embedding of the step is
//! projected to `hidden` values and added per channel after the first
//! activation. The last layer starts at zero, so a fresh model predicts
//! zero noise.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream, ChainRng};
use crate::schedule::NoiseSchedule;
use crate::tensor::{gpt1, Tape, Tensor, Var};

pub const MANIFEST_KIND: &str = "gradpaint-conv-denoiser";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvDenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl ConvDenoiserConfig {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            hidden: 32,
            embed_dim: 32,
        }
    }

    fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Parameter names and shapes, in forward order.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, h, e) = (self.channels, self.hidden, self.embed_dim);
        vec![
            ("conv1.weight", vec![3, 3, c, h]),
            ("conv1.bias", vec![h]),
            ("time.weight", vec![h, e]),
            ("time.bias", vec![h]),
            ("conv2.weight", vec![3, 3, h, h]),
            ("conv2.bias", vec![h]),
            ("conv3.weight", vec![3, 3, h, h]),
            ("conv3.bias", vec![h]),
            ("conv4.weight", vec![3, 3, h, c]),
            ("conv4.bias", vec![c]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvDenoiser {
    config: ConvDenoiserConfig,
    params: Vec<(String, Tensor)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.02,
            momentum: 0.9,
            batch: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
}

/// Sinusoidal embedding of `t` expressed on a 1000-step scale.
fn time_embedding(t: usize, steps: usize, dim: usize) -> Tensor {
    let pos = t as f64 * 1000.0 / steps as f64;
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    Tensor::from_parts(vec![dim], out)
}

impl ConvDenoiser {
    /// He-initialised hidden layers, zero output layer.
    pub fn new(config: ConvDenoiserConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.channels == 0 || config.embed_dim < 2 {
            return Err(Error::invalid(
                "ConvDenoiser::new",
                format!("degenerate config {config:?}"),
            ));
        }
        let mut rng = rng_for(seed, &[stream::INIT]);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = match name {
                    "conv1.weight" | "conv2.weight" | "conv3.weight" => {
                        let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
                        Tensor::randn(&shape, &mut rng).map(|v| v * (2.0 / fan_in).sqrt())
                    }
                    "time.weight" => {
                        let fan_in = shape[1] as f64;
                        Tensor::randn(&shape, &mut rng).map(|v| v / fan_in.sqrt())
                    }
                    _ => Tensor::zeros(&shape),
                };
                (name.to_string(), t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ConvDenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Forward pass with the parameters already placed on the tape.
    fn forward<'t>(&self, x: Var<'t>, t: usize, steps: usize, p: &[Var<'t>]) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape != self.config.image_shape() {
            return Err(Error::ShapeMismatch {
                op: "conv_denoiser_forward",
                left: self.config.image_shape().to_vec(),
                right: shape,
            });
        }
        let emb = x.constant(time_embedding(t, steps, self.config.embed_dim));
        let temb = p[2].matvec(emb)?.add(p[3])?;

        let h = x.conv2d(p[0])?.add_channel_bias(p[1])?.silu();
        let h = h.add_channel_bias(temb)?;
        let h = h.conv2d(p[4])?.add_channel_bias(p[5])?.silu();
        let h = h.conv2d(p[6])?.add_channel_bias(p[7])?.silu();
        h.conv2d(p[8])?.add_channel_bias(p[9])
    }

    /// Noise-prediction loss `mean |eps - eps_theta(x_t, t)|^2` averaged over
    /// `samples` draws of `(x0, t, eps)`.
    pub fn evaluate_loss(
        &self,
        mut data: impl FnMut(&mut ChainRng) -> Tensor,
        schedule: &NoiseSchedule,
        samples: usize,
        seed: u64,
    ) -> Result<f64> {
        let mut rng = rng_for(seed, &[stream::TRAINING, 1]);
        let mut total = 0.0;
        for _ in 0..samples {
            let (x_t, t, eps) = draw_example(&mut data, schedule, &mut rng)?;
            let tape = Tape::no_grad();
            let pred = self.eps(tape.constant(x_t), t, schedule)?.value();
            total += pred.zip_map(&eps, |a, b| (a - b) * (a - b))?.data().iter().sum::<f64>() / eps.numel() as f64;
        }
        Ok(total / samples.max(1) as f64)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = BTreeMap::new();
        for (name, t) in &self.params {
            let file = format!("{name}.gpt1");
            gpt1::write(dir.join(&file), t)?;
            tensors.insert(name.clone(), file);
        }
        let manifest = Manifest {
            kind: MANIFEST_KIND.to_string(),
            version: MANIFEST_VERSION,
            config: self.config,
            tensors,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.kind != MANIFEST_KIND || manifest.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported manifest {} v{}",
                path.display(),
                manifest.kind,
                manifest.version
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut params = Vec::new();
        for (name, shape) in manifest.config.layout() {
            let file = manifest
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("{}: missing tensor {name}", path.display())))?;
            let t = gpt1::read(base.join(file))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "ConvDenoiser::load",
                    left: shape,
                    right: t.shape().to_vec(),
                });
            }
            params.push((name.to_string(), t));
        }
        Ok(Self {
            config: manifest.config,
            params,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: String,
    version: u32,
    config: ConvDenoiserConfig,
    /// Parameter name -> GPT1 file relative to the manifest.
    tensors: BTreeMap<String, String>,
}

fn draw_example(
    data: &mut impl FnMut(&mut ChainRng) -> Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChainRng,
) -> Result<(Tensor, usize, Tensor)> {
    let x0 = data(rng);
    let t = rng.random_range(1..=schedule.steps());
    let eps = Tensor::randn(x0.shape(), rng);
    let x_t = schedule.mix(&x0, &eps, t)?;
    Ok((x_t, t, eps))
}

impl Denoiser for ConvDenoiser {
    fn eps<'t>(&self, x_t: Var<'t>, t: usize, schedule: &NoiseSchedule) -> Result<Var<'t>> {
        let params: Vec<Var<'t>> = self.params.iter().map(|(_, p)| x_t.constant(p.clone())).collect();
        self.forward(x_t, t, schedule.steps(), &params)
    }
}

/// Minimises the noise-prediction objective with momentum SGD.
///
/// Each step draws `batch` examples with uniform `t` and fresh noise.
pub fn train_denoiser(
    model: &mut ConvDenoiser,
    mut data: impl FnMut(&mut ChainRng) -> Tensor,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    let mut rng = rng_for(cfg.seed, &[stream::TRAINING]);
    let mut velocity: Vec<Tensor> = model.params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
    let mut log = TrainingLog::default();
    let batch = cfg.batch.max(1);

    for step in 0..cfg.steps {
        let tape = Tape::new();
        let params: Vec<Var<'_>> = model.params.iter().map(|(_, p)| tape.leaf(p.clone())).collect();
        let mut total: Option<Var<'_>> = None;
        for _ in 0..batch {
            let (x_t, t, eps) = draw_example(&mut data, schedule, &mut rng)?;
            let pred = model.forward(tape.constant(x_t), t, schedule.steps(), &params)?;
            let loss = pred.sub(tape.constant(eps))?.square().mean()?;
            total = Some(match total {
                Some(acc) => acc.add(loss)?,
                None => loss,
            });
        }
        let loss = total.expect("batch >= 1").scale(1.0 / batch as f64);
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        log.losses.push(value);

        let grads = loss.backward()?;
        for ((var, (_, param)), vel) in params.iter().zip(model.params.iter_mut()).zip(&mut velocity) {
            let g = grads.get(*var).expect("parameters are leaves");
            for ((v, gv), p) in vel.data_mut().iter_mut().zip(g.data()).zip(param.data_mut()) {
                *v = cfg.momentum * *v + gv;
                *p -= cfg.lr * *v;
            }
        }
    }
    Ok(log)
}

impl ConvDenoiser {
    /// Convenience wrapper around [`train_denoiser`].
    pub fn train(
        &mut self,
        data: impl FnMut(&mut ChainRng) -> Tensor,
        schedule: &NoiseSchedule,
        cfg: &TrainConfig,
    ) -> Result<TrainingLog> {
        train_denoiser(self, data, schedule, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;

    #[test]
    fn fresh_model_predicts_zero() {
        let model = ConvDenoiser::new(ConvDenoiserConfig::new(8, 8, 1), 1).unwrap();
        let s = make_linear_schedule(20).unwrap();
        let tape = Tape::no_grad();
        let mut rng = rng_for(2, &[]);
        let x = tape.constant(Tensor::randn(&[8, 8, 1], &mut rng));
        let out = model.eps(x, 4, &s).unwrap().value();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        let s = make_linear_schedule(20).unwrap();
        for n in [8, 16, 32] {
            let mut cfg = ConvDenoiserConfig::new(n, n, 1);
            cfg.hidden = 4;
            let model = ConvDenoiser::new(cfg, 0).unwrap();
            let tape = Tape::no_grad();
            let out = model.eps(tape.constant(Tensor::zeros(&[n, n, 1])), 3, &s).unwrap();
            assert_eq!(out.shape(), vec![n, n, 1]);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let model = ConvDenoiser::new(ConvDenoiserConfig::new(8, 8, 1), 0).unwrap();
        let s = make_linear_schedule(20).unwrap();
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::zeros(&[8, 4, 1]));
        assert!(matches!(model.eps(x, 1, &s), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_steps_leaves_model_unchanged() {
        let mut model = ConvDenoiser::new(ConvDenoiserConfig::new(4, 4, 1), 3).unwrap();
        let before = model.clone();
        let s = make_linear_schedule(20).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let log = model.train(|_| Tensor::zeros(&[4, 4, 1]), &s, &cfg).unwrap();
        assert!(log.losses.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn divergent_training_aborts() {
        let mut model = ConvDenoiser::new(ConvDenoiserConfig::new(4, 4, 1), 3).unwrap();
        let s = make_linear_schedule(20).unwrap();
        let cfg = TrainConfig {
            steps: 200,
            lr: 1e6,
            ..TrainConfig::default()
        };
        let err = model.train(|_| Tensor::full(&[4, 4, 1], 0.5), &s, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ConvDenoiserConfig::new(4, 4, 1);
        cfg.hidden = 3;
        let model = ConvDenoiser::new(cfg, 9).unwrap();
        let manifest = model.save(dir.path()).unwrap();
        let back = ConvDenoiser::load(&manifest).unwrap();
        assert_eq!(back.config(), model.config());
        for ((na, a), (nb, b)) in model.params().iter().zip(back.params()) {
            assert_eq!(na, nb);
            let narrowed = a.map(|v| v as f32 as f64);
            assert!(narrowed.bit_eq(b), "{na}");
        }
    }
}
