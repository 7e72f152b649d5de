//! Training driver: runs the core trainer over a dataset, logs losses to
//! CSV and writes checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dc2_core::dfnet::{ModelConfig, PathSelection};
use dc2_core::loss::LossBreakdown;
use dc2_core::train::{SceneStack, StepReport, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{io_err, Error, Result};

/// Model variants used in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    WOnly,
    UwOnly,
    NoOcclusion,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::WOnly, Ablation::UwOnly, Ablation::NoOcclusion];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::WOnly => "w-only",
            Ablation::UwOnly => "uw-only",
            Ablation::NoOcclusion => "no-occlusion",
        }
    }

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut cfg = cfg.clone();
        match self {
            Ablation::WOnly => cfg.paths = PathSelection::WOnly,
            Ablation::UwOnly => cfg.paths = PathSelection::UwOnly,
            Ablation::NoOcclusion => cfg.use_occlusion_input = false,
        }
        cfg
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation {s:?} (expected w-only, uw-only or no-occlusion)")))
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Option<Ablation>,
}

impl TrainRun {
    /// Model configuration with the ablation applied.
    pub fn effective_model(&self) -> ModelConfig {
        match self.ablation {
            Some(a) => a.apply(&self.model),
            None => self.model.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub checkpoint_id: String,
    pub steps: usize,
    pub final_loss: LossBreakdown,
    pub seconds: f64,
    pub log: PathBuf,
}

pub const LOG_CSV_HEADER: &str = "step,lr,total,l1_pixel,l1_grad,ssim,perceptual";

fn log_row(r: &StepReport) -> String {
    let l = &r.loss;
    format!(
        "{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        r.step, r.lr, l.total, l.l1_pixel, l.l1_grad, l.ssim, l.perceptual
    )
}

/// `model.ckpt` -> `model.log.csv`.
pub fn log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.csv")
}

/// `model.ckpt` -> `model.step001000.ckpt`.
pub fn intermediate_path(ckpt: &Path, step: usize) -> PathBuf {
    ckpt.with_extension(format!("step{step:06}.ckpt"))
}

fn checkpoint_meta(run: &TrainRun, steps: usize, loss: &LossBreakdown) -> serde_json::Value {
    serde_json::json!({
        "train": run.train,
        "ablation": run.ablation,
        "steps": steps,
        "final_loss": loss.total,
    })
}

/// Trains on `scenes` and writes the final checkpoint to `out`.
/// Intermediate checkpoints go next to it every `checkpoint_every` steps.
/// `progress` sees every step report.
pub fn train_on_scenes(
    scenes: &[SceneStack],
    run: &TrainRun,
    out: &Path,
    mut progress: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    if run.train.total_steps() == 0 {
        return Err(Error::Invalid("training needs at least one step".into()));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let start = Instant::now();
    let mut trainer = Trainer::new(&run.effective_model(), run.train.clone())?;
    let log = log_path(out);
    let mut csv = String::from(LOG_CSV_HEADER);
    csv.push('\n');
    let mut last = None;
    while !trainer.is_finished() {
        let report = trainer.step(scenes)?;
        progress(&report);
        let done = trainer.steps_done();
        let log_every = run.train.log_every.max(1);
        if report.step % log_every == 0 || trainer.is_finished() {
            csv.push_str(&log_row(&report));
            fs::write(&log, &csv).map_err(io_err(&log))?;
        }
        if run.train.checkpoint_every > 0 && done % run.train.checkpoint_every == 0 && !trainer.is_finished() {
            let meta = checkpoint_meta(run, done, &report.loss);
            checkpoint::save(&intermediate_path(out, done), trainer.model(), &meta)?;
        }
        last = Some(report);
    }
    let last = last.expect("at least one step ran");
    let steps = trainer.steps_done();
    let id = checkpoint::save(out, trainer.model(), &checkpoint_meta(run, steps, &last.loss))?;
    Ok(TrainOutcome {
        checkpoint: out.to_path_buf(),
        checkpoint_id: id,
        steps,
        final_loss: last.loss,
        seconds: start.elapsed().as_secs_f64(),
        log,
    })
}

/// One-line loss summary for console output.
pub fn describe(report: &StepReport) -> String {
    format!(
        "step {:>6} lr {:.1e} loss {:.5} (l1 {:.5} grad {:.5} ssim {:.5})",
        report.step, report.lr, report.loss.total, report.loss.l1_pixel, report.loss.l1_grad, report.loss.ssim
    )
}
