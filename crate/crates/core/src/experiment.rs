//! Batch evaluation driven by an [`ExperimentConfig`].
//!
//! Run `r` draws its ground-truth image from the prior with
//! `rng_for(seed, [r, IMAGE])`, its mask with seed `derive_seed(seed, [r,
//! MASK])`, and every sampler on that run shares the chain seed
//! `derive_seed(seed, [r, CHAIN])`. Runs are evaluated in parallel and
//! collected in run order, so results do not depend on the thread count.
//!
//! Output files (in `output_dir`):
//!
//! - `eval.csv`: `method,mask_kind,run,seed,nll_prior,seam_energy,masked_rmse`,
//!   one row per (method, run), methods in config order.
//! - `summary.csv`: per-method means.
//! - `timing.csv`: `method,run,wall_clock_s`, only with `record_timing`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, MethodKind, MethodSpec};
use crate::denoisers::{Denoiser, GmmPrior};
use crate::error::{Error, Result};
use crate::losses::collage_value;
use crate::masks::{generate_mask, MaskSpec};
use crate::metrics::{EvalRecord, InpaintTask};
use crate::rng::{derive_seed, rng_for, stream};
use crate::samplers::{inpaint, GuidanceConfig};
use crate::schedule::{make_linear_schedule, NoiseSchedule};
use crate::stats::{paired_t_greater, PairedTest};
use crate::tensor::Tensor;

pub struct Experiment {
    pub config: ExperimentConfig,
    pub prior: GmmPrior,
    pub denoiser: Box<dyn Denoiser>,
    pub schedule: NoiseSchedule,
}

impl Experiment {
    /// `base` resolves relative paths inside the config.
    pub fn new(config: ExperimentConfig, base: &Path) -> Result<Self> {
        config.validate(base)?;
        let prior = config.task.build_prior()?;
        let denoiser = config.task.build_denoiser(&prior, base)?;
        let schedule = make_linear_schedule(config.guidance.steps)?;
        Ok(Self {
            config,
            prior,
            denoiser,
            schedule,
        })
    }

    pub fn task(&self, run: usize) -> Result<InpaintTask> {
        let seed = self.config.seed;
        let r = run as u64;
        let (_, image) = self.prior.sample(&mut rng_for(seed, &[r, stream::IMAGE]));
        let spec = MaskSpec::new(self.config.mask, derive_seed(seed, &[r, stream::MASK]));
        let mask = generate_mask(&spec, self.config.task.height, self.config.task.width)?;
        Ok(InpaintTask {
            run,
            seed: derive_seed(seed, &[r, stream::CHAIN]),
            image,
            mask,
            mask_kind: self.config.mask.name().to_string(),
        })
    }

    pub fn tasks(&self) -> Result<Vec<InpaintTask>> {
        (0..self.config.runs).map(|r| self.task(r)).collect()
    }

    /// Output of one method on one task and its wall-clock time.
    pub fn run_method(&self, spec: &MethodSpec, task: &InpaintTask) -> Result<(Tensor, f64)> {
        let started = Instant::now();
        let out = match spec.method.sampler() {
            None if spec.method == MethodKind::Copy => task.image.clone(),
            None => collage_value(&Tensor::zeros(task.image.shape()), &task.image, &task.mask)?,
            Some(method) => {
                let cfg = GuidanceConfig {
                    rng_seed: task.seed,
                    ..spec.apply(&self.config.guidance)
                };
                inpaint(method, &*self.denoiser, &task.image, &task.mask, &self.schedule, &cfg)?.0
            }
        };
        Ok((out, started.elapsed().as_secs_f64()))
    }

    /// Every configured method on every run; rows grouped by method in
    /// config order, then by run.
    pub fn evaluate(&self) -> Result<Vec<EvalRecord>> {
        let tasks = self.tasks()?;
        let per_task = tasks
            .par_iter()
            .map(|task| {
                self.config
                    .methods
                    .iter()
                    .map(|spec| {
                        let (out, secs) = self.run_method(spec, task)?;
                        let (nll, seam, rmse) = EvalRecord::evaluate(&self.prior, &out, &task.image, &task.mask)?;
                        Ok(EvalRecord {
                            method: spec.label().to_string(),
                            mask_kind: task.mask_kind.clone(),
                            run: task.run,
                            seed: task.seed,
                            nll_prior: nll,
                            seam_energy: seam,
                            masked_rmse: rmse,
                            wall_clock_s: secs,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let m = self.config.methods.len();
        let mut records = Vec::with_capacity(m * tasks.len());
        for k in 0..m {
            records.extend(per_task.iter().map(|row| row[k].clone()));
        }
        Ok(records)
    }
}

#[derive(Serialize)]
struct EvalRow<'a> {
    method: &'a str,
    mask_kind: &'a str,
    run: usize,
    seed: u64,
    nll_prior: f64,
    seam_energy: f64,
    masked_rmse: f64,
}

const EVAL_HEADER: [&str; 7] = [
    "method",
    "mask_kind",
    "run",
    "seed",
    "nll_prior",
    "seam_energy",
    "masked_rmse",
];

fn create(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
}

/// Writes the reproducible part of the records (no timing).
pub fn write_eval_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(EVAL_HEADER)?;
    for r in records {
        w.serialize(EvalRow {
            method: &r.method,
            mask_kind: &r.mask_kind,
            run: r.run,
            seed: r.seed,
            nll_prior: r.nll_prior,
            seam_energy: r.seam_energy,
            masked_rmse: r.masked_rmse,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_timing_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["method", "run", "wall_clock_s"])?;
    for r in records {
        w.write_record([r.method.clone(), r.run.to_string(), r.wall_clock_s.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub mean_nll_prior: f64,
    pub mean_seam_energy: f64,
    pub mean_masked_rmse: f64,
}

/// Per-method means in order of first appearance.
pub fn summarize(records: &[EvalRecord]) -> Vec<MethodSummary> {
    let mut out: Vec<MethodSummary> = Vec::new();
    for r in records {
        if !out.iter().any(|s| s.method == r.method) {
            let rows: Vec<&EvalRecord> = records.iter().filter(|x| x.method == r.method).collect();
            let n = rows.len() as f64;
            let mean = |f: fn(&EvalRecord) -> f64| rows.iter().map(|x| f(x)).sum::<f64>() / n;
            out.push(MethodSummary {
                method: r.method.clone(),
                runs: rows.len(),
                mean_nll_prior: mean(|x| x.nll_prior),
                mean_seam_energy: mean(|x| x.seam_energy),
                mean_masked_rmse: mean(|x| x.masked_rmse),
            });
        }
    }
    out
}

pub fn write_summary_csv(path: &Path, summary: &[MethodSummary]) -> Result<()> {
    write_rows(
        path,
        &[
            "method",
            "runs",
            "mean_nll_prior",
            "mean_seam_energy",
            "mean_masked_rmse",
        ],
        summary,
    )
}

/// Writes `header` and then one serialized row per item; an empty slice
/// gives a header-only file.
pub fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    NllPrior,
    SeamEnergy,
    MaskedRmse,
}

impl Metric {
    pub fn of(&self, r: &EvalRecord) -> f64 {
        match self {
            Metric::NllPrior => r.nll_prior,
            Metric::SeamEnergy => r.seam_energy,
            Metric::MaskedRmse => r.masked_rmse,
        }
    }
}

/// Metric values of one method, indexed by run.
pub fn column(records: &[EvalRecord], method: &str, metric: Metric) -> Vec<f64> {
    let mut rows: Vec<&EvalRecord> = records.iter().filter(|r| r.method == method).collect();
    rows.sort_by_key(|r| r.run);
    rows.iter().map(|r| metric.of(r)).collect()
}

/// Paired test of `worse > better` on `metric` (lower is better).
pub fn compare(records: &[EvalRecord], worse: &str, better: &str, metric: Metric) -> Result<PairedTest> {
    paired_t_greater(&column(records, worse, metric), &column(records, better, metric))
}

/// Runs the evaluation and writes its files; returns the records and the
/// list of files written.
pub fn run_eval(config: ExperimentConfig, base: &Path) -> Result<(Vec<EvalRecord>, Vec<PathBuf>)> {
    let exp = Experiment::new(config, base)?;
    let dir = base.join(&exp.config.output_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let records = exp.evaluate()?;
    let mut written = vec![dir.join("eval.csv"), dir.join("summary.csv")];
    write_eval_csv(&written[0], &records)?;
    write_summary_csv(&written[1], &summarize(&records))?;
    if exp.config.record_timing {
        let path = dir.join("timing.csv");
        write_timing_csv(&path, &records)?;
        written.push(path);
    }
    Ok((records, written))
}
