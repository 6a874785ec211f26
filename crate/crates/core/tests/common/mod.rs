//! Shared setup for the integration suites.
#![allow(dead_code)]

use std::path::Path;

use gradpaint::config::{ExperimentConfig, MethodKind, MethodSpec, PriorSpec, TaskConfig};
use gradpaint::experiment::Experiment;
use gradpaint::masks::MaskKind;
use gradpaint::priors::{Preset, DEFAULT_STD};
use gradpaint::samplers::GuidanceConfig;

/// Step size for the 16x16 toy task. The default of 0.005 is tuned for
/// 256x256x3 images and leaves a 256-dimensional chain untouched.
pub const TOY_LEARNING_RATE: f64 = 0.5;

/// Held-out seed for the harmonization experiments.
pub const TOY_SEED: u64 = 1001;

pub fn gradpaint_without_alignment() -> MethodSpec {
    let mut spec = MethodSpec::new(MethodKind::GradPaint).labelled("gradpaint-mse");
    spec.lambda_al = Some(0.0);
    spec
}

/// The 16x16 smooth-prior harmonization task with every method.
pub fn toy_config(mask: MaskKind, runs: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        version: gradpaint::config::CONFIG_VERSION,
        task: TaskConfig {
            height: 16,
            width: 16,
            prior: PriorSpec::Preset {
                preset: Preset::Smooth4,
                std: DEFAULT_STD,
            },
            denoiser: Default::default(),
        },
        mask,
        methods: vec![
            MethodSpec::new(MethodKind::Greyfill),
            MethodSpec::new(MethodKind::CombineNoisy),
            MethodSpec::new(MethodKind::CombineImage),
            gradpaint_without_alignment(),
            MethodSpec::new(MethodKind::GradPaint),
            MethodSpec::new(MethodKind::GradPaintFast),
        ],
        guidance: GuidanceConfig {
            learning_rate: TOY_LEARNING_RATE,
            ..Default::default()
        },
        runs,
        output_dir: "out".into(),
        seed,
        record_timing: false,
    }
}

pub fn toy_experiment(mask: MaskKind, runs: usize, seed: u64) -> Experiment {
    Experiment::new(toy_config(mask, runs, seed), Path::new(".")).expect("toy experiment")
}

use gradpaint::denoisers::GmmPrior;
use gradpaint::masks::{generate_mask, MaskSpec};
use gradpaint::rng::rng_for;
use gradpaint::schedule::NoiseSchedule;
use gradpaint::tensor::{Pad, Tape, Tensor, Var};
use gradpaint::Mask;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng_for(seed, &[0]))
}

pub fn thick_mask(seed: u64) -> Mask {
    generate_mask(&MaskSpec::new(MaskKind::Thick, seed), 8, 8).unwrap()
}

/// Pins a closure to the signature [`gradient_error`] expects.
pub fn scalar_fn<F: for<'t> Fn(Var<'t>) -> Var<'t>>(f: F) -> F {
    f
}

/// Largest relative discrepancy between the tape gradient of `f` at `x` and
/// central differences with step `h`.
///
/// Each entry is compared relative to the larger of its two estimates,
/// floored at 1e-3 of the largest numerical entry so that near-zero
/// components do not dominate.
pub fn gradient_error<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: for<'t> Fn(Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(leaf);
    let analytic = out
        .backward()
        .unwrap()
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |v: &Tensor| {
        let t = Tape::no_grad();
        f(t.constant(v.clone())).item().unwrap()
    };
    let numeric: Vec<f64> = (0..x.numel())
        .map(|i| {
            let (mut up, mut down) = (x.clone(), x.clone());
            up.data_mut()[i] += h;
            down.data_mut()[i] -= h;
            (eval(&up) - eval(&down)) / (2.0 * h)
        })
        .collect();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(1e-300))
        .fold(0.0, f64::max)
}

/// One randomly chosen differentiable op.
fn apply<'t>(op: usize, x: Var<'t>, aux: &Tensor, weight: &Tensor) -> Var<'t> {
    match op {
        0 => x.mul(x.shift(0, 1, Pad::Replicate).unwrap()).unwrap(),
        1 => x.scale(0.3).exp(),
        2 => x.square().add_scalar(1.0).sqrt(),
        3 => x.square().add_scalar(1.0).ln(),
        4 => x.silu(),
        5 => x.conv2d(x.constant(weight.clone())).unwrap(),
        6 => x.add(x.constant(aux.clone())).unwrap(),
        7 => x.div(x.square().add_scalar(1.0)).unwrap(),
        _ => x.sub(x.shift(1, -1, Pad::Zero).unwrap()).unwrap(),
    }
}

/// Gradient error of a random chain of 3 to 6 ops on an 8x8 input, reduced
/// by a random projection plus a log-sum-exp.
pub fn composite_graph_error(graph: u64) -> f64 {
    let mut rng = rng_for(graph, &[1]);
    let ops: Vec<usize> = (0..rng.random_range(3..=6)).map(|_| rng.random_range(0..9)).collect();
    let x = random(&[8, 8, 1], graph);
    let aux = random(&[8, 8, 1], 100 + graph).map(|v| 0.5 * v);
    let weight = random(&[3, 3, 1, 1], 200 + graph).map(|v| 0.3 * v);
    let probe = random(&[8, 8, 1], 300 + graph);
    let f = scalar_fn(|v| {
        let mut y = v;
        for &op in &ops {
            y = apply(op, y, &aux, &weight);
        }
        let lse = y.reshape(&[64]).unwrap().logsumexp(0).unwrap();
        y.mul(y.constant(probe.clone())).unwrap().sum().add(lse).unwrap()
    });
    gradient_error(f, &x, FD_STEP)
}

/// `-sqrt(1 - ab) * d/dx log p_t(x)` by central differences.
pub fn numeric_eps(prior: &GmmPrior, x: &Tensor, ab: f64, h: f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let (mut up, mut down) = (x.clone(), x.clone());
            up.data_mut()[i] += h;
            down.data_mut()[i] -= h;
            let d = (prior.log_marginal(&up, ab).unwrap() - prior.log_marginal(&down, ab).unwrap()) / (2.0 * h);
            -(1.0 - ab).sqrt() * d
        })
        .collect()
}

/// Relative error of the exact score on a random (prior, x_t, t) triple.
pub fn score_error(triple: u64, s: &NoiseSchedule) -> f64 {
    let mut rng = rng_for(triple, &[7]);
    let k = rng.random_range(1..=4);
    let dim = rng.random_range(2..=16);
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let means = (0..k).map(|_| Tensor::randn(&[dim], &mut rng)).collect();
    let std = rng.random_range(0.1..1.0);
    let prior = GmmPrior::new(raw.iter().map(|w| w / total).collect(), means, std).unwrap();
    let t = rng.random_range(1..=s.steps());
    let ab = s.alpha_bar(t);
    let x = Tensor::randn(&[dim], &mut rng).map(|v| v * prior.marginal_variance(ab).sqrt());

    let tape = Tape::no_grad();
    let eps = gradpaint::denoisers::gmm_eps(&prior, tape.constant(x.clone()), t, s, None)
        .unwrap()
        .value();
    let numeric = numeric_eps(&prior, &x, ab, 1e-5);
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    eps.data()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}
