//! `gradpaint` command-line driver.
//!
//! Bad flags exit with status 2 and usage text; runtime failures print one
//! `error:` line and exit with status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gradpaint::config::{DenoiserSpec, ExperimentConfig, PriorSpec, TaskConfig};
use gradpaint::denoisers::{train_denoiser, ConvDenoiser, ConvDenoiserConfig, Denoiser, GmmPrior, TrainConfig};
use gradpaint::experiment::{run_eval, summarize, write_rows, Experiment};
use gradpaint::losses::{LossTarget, DEFAULT_LAMBDA_AL};
use gradpaint::masks::{coverage, generate_mask, MaskKind, MaskSpec};
use gradpaint::metrics::{diversity_study, timing_sweep};
use gradpaint::pnm;
use gradpaint::priors::{Preset, DEFAULT_STD};
use gradpaint::rng::derive_seed;
use gradpaint::samplers::{inpaint, sample_unconditional, GuidanceConfig, Method};
use gradpaint::schedule::make_linear_schedule;
use gradpaint::tensor::gpt1;

#[derive(Parser)]
#[command(
    name = "gradpaint",
    version,
    about = "Gradient-guided diffusion inpainting at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw unconditional samples from the prior's reverse chain.
    Sample(SampleArgs),
    /// Inpaint one image under one mask.
    Inpaint(InpaintArgs),
    /// Generate a set of masks and report their coverage.
    MakeMasks(MakeMasksArgs),
    /// Fit the convolutional noise estimator to samples of a prior.
    TrainDenoiser(TrainArgs),
    /// Run a batch study from an experiment config.
    Eval(EvalArgs),
    /// Time GradPaint for several gradient-stop fractions.
    Sweep(SweepArgs),
    /// Measure sample variance inside centred masks of growing size.
    Diversity(DiversityArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Ramps2,
    Smooth4,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Ramps2 => Preset::Ramps2,
            PresetArg::Smooth4 => Preset::Smooth4,
        }
    }
}

/// Prior and noise estimator for single-image commands.
#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "smooth4")]
    preset: PresetArg,
    /// Per-pixel std of each mixture component.
    #[arg(long, default_value_t = DEFAULT_STD)]
    std: f64,
    /// Manifest of a trained model; the exact mixture score is used otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Diffusion steps T.
    #[arg(long, default_value_t = 100)]
    steps: usize,
}

impl ModelArgs {
    fn task(&self, height: usize, width: usize) -> TaskConfig {
        TaskConfig {
            height,
            width,
            prior: PriorSpec::Preset {
                preset: self.preset.into(),
                std: self.std,
            },
            denoiser: match &self.model {
                Some(manifest) => DenoiserSpec::Trained {
                    manifest: manifest.clone(),
                },
                None => DenoiserSpec::Exact,
            },
        }
    }

    fn build(&self, height: usize, width: usize) -> Result<(GmmPrior, Box<dyn Denoiser>)> {
        let task = self.task(height, width);
        let prior = task.build_prior()?;
        let denoiser = task.build_denoiser(&prior, Path::new("."))?;
        Ok((prior, denoiser))
    }
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write each sample as a GPT1 tensor.
    #[arg(long)]
    tensors: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossTargetArg {
    Collage,
    RawX0Hat,
}

#[derive(Args)]
struct InpaintArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    image: PathBuf,
    /// Binary PGM: 255 marks pixels to fill, 0 pixels to keep.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// combine-image, combine-noisy, gradpaint or gradpaint-fast.
    #[arg(long, default_value = "gradpaint")]
    method: Method,
    /// Step size of the guidance update.
    #[arg(long, default_value_t = GuidanceConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_AL)]
    lambda_al: f64,
    #[arg(long, default_value_t = GuidanceConfig::default().align_active_fraction)]
    align_fraction: f64,
    #[arg(long, default_value_t = GuidanceConfig::default().grad_stop_fraction)]
    grad_stop: f64,
    #[arg(long, value_enum, default_value = "collage")]
    loss_target: LossTargetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-step loss and gradient telemetry as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Save the collage every k steps (needs --snapshot-dir).
    #[arg(long, default_value_t = 0)]
    snapshot_every: usize,
    #[arg(long)]
    snapshot_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskKindArg {
    Thin,
    Medium,
    Thick,
    Bernoulli,
}

#[derive(Args)]
struct MakeMasksArgs {
    #[arg(long, value_enum)]
    kind: MaskKindArg,
    /// Per-pixel probability for bernoulli masks.
    #[arg(long, default_value_t = 0.8)]
    p: f64,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "smooth4")]
    preset: PresetArg,
    #[arg(long, default_value_t = DEFAULT_STD)]
    std: f64,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Diffusion steps T the model is trained for.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    train_steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Experiment config plus optional overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    /// The config and the directory its relative paths resolve against.
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = std::path::absolute(dir)?;
        }
        let base = self.config.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    fractions: Vec<f64>,
}

#[derive(Args)]
struct DiversityArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "gradpaint")]
    method: Method,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,0.75")]
    coverages: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    samples: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn sample(args: SampleArgs) -> Result<()> {
    let (_, denoiser) = args.model.build(args.height, args.width)?;
    let schedule = make_linear_schedule(args.model.steps)?;
    create_dir(&args.out_dir)?;
    for k in 0..args.n {
        let x = sample_unconditional(
            &*denoiser,
            &schedule,
            &[args.height, args.width, 1],
            derive_seed(args.seed, &[k as u64]),
        )?;
        pnm::save_image(args.out_dir.join(format!("sample_{k:04}.pgm")), &x)?;
        if args.tensors {
            gpt1::write(args.out_dir.join(format!("sample_{k:04}.gpt1")), &x)?;
        }
    }
    println!("wrote {} samples to {}", args.n, args.out_dir.display());
    Ok(())
}

fn run_inpaint(args: InpaintArgs) -> Result<()> {
    let image = pnm::load_image(&args.image)?;
    let mask = pnm::load_mask(&args.mask)?;
    let [h, w, _] = image.shape() else {
        bail!("{} is not an image", args.image.display());
    };
    let (_, denoiser) = args.model.build(*h, *w)?;
    let schedule = make_linear_schedule(args.model.steps)?;
    if args.snapshot_every > 0 && args.snapshot_dir.is_none() {
        bail!("--snapshot-every needs --snapshot-dir");
    }
    let cfg = GuidanceConfig {
        steps: args.model.steps,
        lambda_al: args.lambda_al,
        learning_rate: args.lr,
        align_active_fraction: args.align_fraction,
        grad_stop_fraction: args.grad_stop,
        loss_target: match args.loss_target {
            LossTargetArg::Collage => LossTarget::Collage,
            LossTargetArg::RawX0Hat => LossTarget::RawX0Hat,
        },
        rng_seed: args.seed,
        snapshot_every: args.snapshot_every,
        telemetry: args.trace.is_some(),
    };
    let (out, trace) = inpaint(args.method, &*denoiser, &image, &mask, &schedule, &cfg)?;
    pnm::save_image(&args.out, &out)?;
    if let Some(path) = &args.trace {
        trace.save_csv(path)?;
    }
    if let Some(dir) = &args.snapshot_dir {
        create_dir(dir)?;
        for (t, x) in &trace.snapshots {
            gpt1::write(dir.join(format!("collage_t{t:04}.gpt1")), x)?;
        }
    }
    println!("{} -> {}", args.method, args.out.display());
    Ok(())
}

fn make_masks(args: MakeMasksArgs) -> Result<()> {
    let kind = match args.kind {
        MaskKindArg::Thin => MaskKind::Thin,
        MaskKindArg::Medium => MaskKind::Medium,
        MaskKindArg::Thick => MaskKind::Thick,
        MaskKindArg::Bernoulli => MaskKind::Bernoulli { p: args.p },
    };
    create_dir(&args.out_dir)?;
    let mut rows = Vec::with_capacity(args.n);
    for k in 0..args.n {
        let seed = derive_seed(args.seed, &[k as u64]);
        let mask = generate_mask(&MaskSpec::new(kind, seed), args.height, args.width)?;
        pnm::save_mask(args.out_dir.join(format!("mask_{k:04}.pgm")), &mask)?;
        rows.push((k, seed, coverage(&mask)));
    }
    write_rows(
        &args.out_dir.join("coverage.csv"),
        &["index", "seed", "coverage"],
        &rows,
    )?;
    if args.n > 0 {
        let mean = rows.iter().map(|r| r.2).sum::<f64>() / args.n as f64;
        println!("mean coverage {mean:.4} over {} {} masks", args.n, kind.name());
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let task = TaskConfig {
        height: args.height,
        width: args.width,
        prior: PriorSpec::Preset {
            preset: args.preset.into(),
            std: args.std,
        },
        denoiser: DenoiserSpec::Exact,
    };
    let prior = task.build_prior()?;
    let schedule = make_linear_schedule(args.steps)?;
    let config = ConvDenoiserConfig {
        hidden: args.hidden,
        ..ConvDenoiserConfig::new(args.height, args.width, 1)
    };
    let mut model = ConvDenoiser::new(config, args.seed)?;
    let cfg = TrainConfig {
        steps: args.train_steps,
        lr: args.lr,
        momentum: args.momentum,
        batch: args.batch,
        seed: args.seed,
    };
    let log = train_denoiser(&mut model, |rng| prior.sample(rng).1, &schedule, &cfg)?;
    let manifest = model.save(&args.out_dir)?;
    let tail = &log.losses[log.losses.len().saturating_sub(20)..];
    if !tail.is_empty() {
        println!(
            "final loss {:.5} (mean of the last {} steps)",
            tail.iter().sum::<f64>() / tail.len() as f64,
            tail.len()
        );
    }
    println!("wrote {}", manifest.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let (cfg, base) = args.config.load()?;
    let (records, files) = run_eval(cfg, &base)?;
    for s in summarize(&records) {
        println!(
            "{:<16} runs {:>4}  nll {:>12.4}  seam {:>9.6}  rmse {:>8.5}",
            s.method, s.runs, s.mean_nll_prior, s.mean_seam_energy, s.mean_masked_rmse
        );
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let (cfg, base) = args.config.load()?;
    let exp = Experiment::new(cfg, &base)?;
    let tasks = exp.tasks()?;
    let rows = timing_sweep(
        &args.fractions,
        &tasks,
        &exp.prior,
        &*exp.denoiser,
        &exp.schedule,
        &exp.config.guidance,
    )?;
    let dir = base.join(&exp.config.output_dir);
    create_dir(&dir)?;
    let path = dir.join("sweep.csv");
    write_rows(
        &path,
        &[
            "grad_stop_fraction",
            "tasks",
            "mean_nll_prior",
            "mean_seam_energy",
            "mean_masked_rmse",
            "wall_clock_s",
        ],
        &rows,
    )?;
    for r in &rows {
        println!(
            "stop {:.3}  nll {:>12.4}  seam {:>9.6}  {:.3}s",
            r.grad_stop_fraction, r.mean_nll_prior, r.mean_seam_energy, r.wall_clock_s
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn diversity(args: DiversityArgs) -> Result<()> {
    let (cfg, base) = args.config.load()?;
    let exp = Experiment::new(cfg, &base)?;
    let image = exp.task(0)?.image;
    let guidance = GuidanceConfig {
        rng_seed: exp.config.seed,
        ..exp.config.guidance
    };
    let rows = diversity_study(
        args.method,
        &*exp.denoiser,
        &image,
        &args.coverages,
        args.samples,
        &exp.schedule,
        &guidance,
    )?;
    let dir = base.join(&exp.config.output_dir);
    create_dir(&dir)?;
    let path = dir.join("diversity.csv");
    write_rows(
        &path,
        &["method", "target_coverage", "coverage", "samples", "variance"],
        &rows,
    )?;
    for r in &rows {
        println!("coverage {:.3}  variance {:.6e}", r.coverage, r.variance);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sample(a) => sample(a),
        Command::Inpaint(a) => run_inpaint(a),
        Command::MakeMasks(a) => make_masks(a),
        Command::TrainDenoiser(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Diversity(a) => diversity(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already embed their source; print each cause once
            let mut line = e.to_string();
            for cause in e.chain().skip(1).map(|c| c.to_string()) {
                if !line.contains(&cause) {
                    line = format!("{line}: {cause}");
                }
            }
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}
