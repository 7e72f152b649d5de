//! Deblur, bokeh and refocus protocols scored with PSNR and SSIM after a
//! shared field-of-view alignment.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dfnet::{Dfnet, NetInput};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{fov_align, psnr, ssim, AlignParams, AlignSearch};
use crate::optics::LensState;
use crate::spec::{render_tiled, TileConfig};
use crate::synth::{focus_stack_merge, render_rgbd, MergeConfig, RenderConfig};
use crate::train::{sample_pair, SceneStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Deblur,
    Bokeh,
    Refocus,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Deblur, Task::Bokeh, Task::Refocus];

    pub fn name(self) -> &'static str {
        match self {
            Task::Deblur => "deblur",
            Task::Bokeh => "bokeh",
            Task::Refocus => "refocus",
        }
    }
}

impl core::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown task {s:?}")))
    }
}

/// One prediction request.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub task: Task,
    pub scene: &'a SceneStack,
    pub input: &'a NetInput,
    /// Slice the input comes from; `None` when the input is the all-in-focus image.
    pub reference: Option<usize>,
    /// Slice whose defocus is requested; `None` for the all-in-focus target.
    pub target: Option<usize>,
}

/// Anything that can answer a [`Query`]: the trained network or a baseline.
pub trait Predictor {
    fn name(&self) -> String;
    fn predict(&self, q: &Query) -> Result<Image>;
}

/// Returns the input wide image unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct CopyInput;

impl Predictor for CopyInput {
    fn name(&self) -> String {
        "copy-input".into()
    }

    fn predict(&self, q: &Query) -> Result<Image> {
        Ok(q.input.w_image.clone())
    }
}

/// Renders the target slice from the all-in-focus image and exact depth
/// with the layered scatter renderer. Only defined for targets that are
/// slices.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClassicalRenderer {
    pub config: RenderConfig,
}

impl Predictor for ClassicalRenderer {
    fn name(&self) -> String {
        "classical-renderer".into()
    }

    fn predict(&self, q: &Query) -> Result<Image> {
        let t = q
            .target
            .ok_or_else(|| Error::InvalidConfig("classical renderer needs a slice target".into()))?;
        let lens = LensState::new(q.scene.focus_mm[t]);
        Ok(render_rgbd(&q.scene.aif, &q.scene.depth, &q.scene.camera, &lens, &self.config)?.0)
    }
}

/// The trained network, rendered with tiling.
pub struct ModelPredictor<'a> {
    pub model: &'a Dfnet<f32>,
    pub id: String,
    pub tiles: TileConfig,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        self.id.clone()
    }

    fn predict(&self, q: &Query) -> Result<Image> {
        render_tiled(self.model, q.input, &self.tiles)
    }
}

/// Adapter turning a closure into a [`Predictor`].
pub struct FnPredictor<F> {
    pub name: String,
    pub f: F,
}

impl<F: Fn(&Query) -> Result<Image>> Predictor for FnPredictor<F> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn predict(&self, q: &Query) -> Result<Image> {
        (self.f)(q)
    }
}

/// Ground truth used for the deblur task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DeblurTruth {
    SceneAif,
    StackMerge(MergeConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// `None` scores raw predictions.
    pub align: Option<AlignSearch>,
    pub deblur_truth: DeblurTruth,
    pub refocus_pairs_per_scene: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            align: Some(AlignSearch::default()),
            deblur_truth: DeblurTruth::SceneAif,
            refocus_pairs_per_scene: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub scene: usize,
    pub reference: Option<usize>,
    pub target: Option<usize>,
    /// `f64::INFINITY` for an exact match.
    pub psnr: f64,
    pub ssim: f64,
    pub align: AlignParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub model_id: String,
    pub images: Vec<ImageScore>,
    /// Infinite if any image matched exactly.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Optional column from a pluggable perceptual backend; not comparable
    /// with published perceptual scores.
    pub perceptual: Option<f64>,
}

impl MetricReport {
    fn new(task: Task, model_id: String, images: Vec<ImageScore>) -> Self {
        let n = images.len().max(1) as f64;
        Self {
            mean_psnr: images.iter().map(|s| s.psnr).sum::<f64>() / n,
            mean_ssim: images.iter().map(|s| s.ssim).sum::<f64>() / n,
            task,
            model_id,
            images,
            perceptual: None,
        }
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn fmt_index(i: Option<usize>) -> String {
    i.map_or_else(|| "aif".into(), |i| format!("{i}"))
}

pub const REPORT_CSV_HEADER: &str = "task,model,scene,reference,target,psnr,ssim,scale,tx,ty";

/// Per-image rows followed by one `mean` row per report.
pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for s in &r.images {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.6},{:.4},{},{}",
                r.task.name(),
                r.model_id,
                s.scene,
                fmt_index(s.reference),
                fmt_index(s.target),
                fmt_psnr(s.psnr),
                s.ssim,
                s.align.scale,
                s.align.tx,
                s.align.ty
            );
        }
        let _ = writeln!(
            out,
            "{},{},mean,,,{},{:.6},,,",
            r.task.name(),
            r.model_id,
            fmt_psnr(r.mean_psnr),
            r.mean_ssim
        );
    }
    out
}

fn score(pred: &Image, truth: &Image, align: &Option<AlignSearch>) -> Result<(f64, f64, AlignParams)> {
    let (params, aligned) = match align {
        Some(search) => fov_align(pred, truth, search)?,
        None => (AlignParams::IDENTITY, pred.clone()),
    };
    let aligned = aligned.clamp01();
    Ok((psnr(&aligned, truth)?, ssim(&aligned, truth)?, params))
}

fn deblur_truth(scene: &SceneStack, opts: &EvalOptions) -> Result<Image> {
    match opts.deblur_truth {
        DeblurTruth::SceneAif => Ok(scene.aif.clone()),
        DeblurTruth::StackMerge(cfg) => focus_stack_merge(&scene.slices.iter().collect::<Vec<_>>(), &cfg),
    }
}

/// Every slice with a zero target map, scored against the all-in-focus image.
pub fn eval_deblur(model: &dyn Predictor, scenes: &[SceneStack], opts: &EvalOptions) -> Result<MetricReport> {
    let mut images = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let truth = deblur_truth(scene, opts)?;
        let zeros = Image::new(truth.width(), truth.height(), 1);
        for (i, slice) in scene.slices.iter().enumerate() {
            let input = scene.net_input(slice, &scene.defocus[i], &zeros)?;
            let q = Query {
                task: Task::Deblur,
                scene,
                input: &input,
                reference: Some(i),
                target: None,
            };
            let (psnr, ssim, align) = score(&model.predict(&q)?, &truth, &opts.align)?;
            images.push(ImageScore {
                scene: si,
                reference: Some(i),
                target: None,
                psnr,
                ssim,
                align,
            });
        }
    }
    Ok(MetricReport::new(Task::Deblur, model.name(), images))
}

/// The all-in-focus image with a zero reference map, asked to produce
/// every slice.
pub fn eval_bokeh(model: &dyn Predictor, scenes: &[SceneStack], opts: &EvalOptions) -> Result<MetricReport> {
    let mut images = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let zeros = Image::new(scene.aif.width(), scene.aif.height(), 1);
        for (t, slice) in scene.slices.iter().enumerate() {
            let input = scene.net_input(&scene.aif, &zeros, &scene.defocus[t])?;
            let q = Query {
                task: Task::Bokeh,
                scene,
                input: &input,
                reference: None,
                target: Some(t),
            };
            let (psnr, ssim, align) = score(&model.predict(&q)?, slice, &opts.align)?;
            images.push(ImageScore {
                scene: si,
                reference: None,
                target: Some(t),
                psnr,
                ssim,
                align,
            });
        }
    }
    Ok(MetricReport::new(Task::Bokeh, model.name(), images))
}

/// Slice pairs `(reference, target)` drawn with a fixed seed; the same
/// pairs for every predictor.
pub fn refocus_pairs(scenes: &[SceneStack], per_scene: usize, seed: u64) -> Result<Vec<(usize, usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(scenes.len() * per_scene);
    for (si, scene) in scenes.iter().enumerate() {
        for _ in 0..per_scene {
            let (r, t) = sample_pair(scene.slices.len(), &mut rng)?;
            pairs.push((si, r, t));
        }
    }
    Ok(pairs)
}

pub fn eval_refocus(model: &dyn Predictor, scenes: &[SceneStack], opts: &EvalOptions) -> Result<MetricReport> {
    let mut images = Vec::new();
    for (si, r, t) in refocus_pairs(scenes, opts.refocus_pairs_per_scene, opts.seed)? {
        let scene = &scenes[si];
        let input = scene.net_input(&scene.slices[r], &scene.defocus[r], &scene.defocus[t])?;
        let q = Query {
            task: Task::Refocus,
            scene,
            input: &input,
            reference: Some(r),
            target: Some(t),
        };
        let (psnr, ssim, align) = score(&model.predict(&q)?, &scene.slices[t], &opts.align)?;
        images.push(ImageScore {
            scene: si,
            reference: Some(r),
            target: Some(t),
            psnr,
            ssim,
            align,
        });
    }
    Ok(MetricReport::new(Task::Refocus, model.name(), images))
}

pub fn eval_task(task: Task, model: &dyn Predictor, scenes: &[SceneStack], opts: &EvalOptions) -> Result<MetricReport> {
    match task {
        Task::Deblur => eval_deblur(model, scenes, opts),
        Task::Bokeh => eval_bokeh(model, scenes, opts),
        Task::Refocus => eval_refocus(model, scenes, opts),
    }
}

/// One row per configuration, one column pair per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub tasks: Vec<Task>,
    pub rows: Vec<(String, Vec<MetricReport>)>,
}

/// Scores every named predictor on every task.
pub fn run_ablations(
    scenes: &[SceneStack],
    configs: &[(String, Box<dyn Predictor + '_>)],
    tasks: &[Task],
    opts: &EvalOptions,
) -> Result<AblationTable> {
    if configs.is_empty() {
        return Err(Error::Empty("no ablation configurations"));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for (name, model) in configs {
        let reports = tasks
            .iter()
            .map(|&t| eval_task(t, model.as_ref(), scenes, opts))
            .collect::<Result<Vec<_>>>()?;
        rows.push((name.clone(), reports));
    }
    Ok(AblationTable {
        tasks: tasks.to_vec(),
        rows,
    })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config");
        for t in &self.tasks {
            let _ = write!(out, ",{0}_psnr,{0}_ssim", t.name());
        }
        out.push('\n');
        for (name, reports) in &self.rows {
            out.push_str(name);
            for r in reports {
                let _ = write!(out, ",{},{:.6}", fmt_psnr(r.mean_psnr), r.mean_ssim);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| config |");
        for t in &self.tasks {
            let _ = write!(out, " {0} PSNR | {0} SSIM |", t.name());
        }
        out.push_str("\n|---|");
        for _ in &self.tasks {
            out.push_str("---:|---:|");
        }
        out.push('\n');
        for (name, reports) in &self.rows {
            let _ = write!(out, "| {name} |");
            for r in reports {
                let p = if r.mean_psnr.is_infinite() { "inf".into() } else { format!("{:.2}", r.mean_psnr) };
                let _ = write!(out, " {p} | {:.4} |", r.mean_ssim);
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, generate_stack, CameraRig, SceneConfig};

    fn scenes() -> Vec<SceneStack> {
        let cfg = SceneConfig {
            width: 64,
            height: 64,
            n_layers: 2,
            ..SceneConfig::default()
        };
        let rig = CameraRig::default_for(64, 64);
        let scene = generate_scene(3, &cfg, &rig.w_cam).unwrap();
        vec![SceneStack::from_stack(&generate_stack(&scene, &rig, 3).unwrap(), 1.0)]
    }

    #[test]
    fn oracle_aif_gives_infinite_psnr() {
        let s = scenes();
        let oracle = FnPredictor {
            name: "oracle".into(),
            f: |q: &Query| Ok(q.scene.aif.clone()),
        };
        let r = eval_deblur(&oracle, &s, &EvalOptions::default()).unwrap();
        assert_eq!(r.mean_psnr, f64::INFINITY);
        assert_eq!(r.images.len(), 3);
        assert!((r.mean_ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn copy_input_matches_direct_scores_without_alignment() {
        let s = scenes();
        let opts = EvalOptions {
            align: None,
            ..EvalOptions::default()
        };
        let r = eval_deblur(&CopyInput, &s, &opts).unwrap();
        for (i, img) in r.images.iter().enumerate() {
            assert_eq!(img.psnr, psnr(&s[0].slices[i], &s[0].aif).unwrap());
        }
    }

    #[test]
    fn refocus_pairs_are_distinct_and_reproducible() {
        let s = scenes();
        let a = refocus_pairs(&s, 20, 9).unwrap();
        assert_eq!(a, refocus_pairs(&s, 20, 9).unwrap());
        assert!(a.iter().all(|&(_, r, t)| r != t));
        let r1 = eval_refocus(&CopyInput, &s, &EvalOptions::default()).unwrap();
        let r2 = eval_refocus(&CopyInput, &s, &EvalOptions::default()).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn classical_bokeh_reproduces_slices_and_table_has_one_row_per_config() {
        let s = scenes();
        let configs: Vec<(String, Box<dyn Predictor>)> = vec![
            ("copy".into(), Box::new(CopyInput)),
            ("classical".into(), Box::new(ClassicalRenderer::default())),
        ];
        let t = run_ablations(&s, &configs, &[Task::Bokeh], &EvalOptions::default()).unwrap();
        assert_eq!(t.rows.len(), 2);
        let classical = &t.rows[1].1[0];
        // Same renderer and exact depth as the data generator.
        assert_eq!(classical.mean_psnr, f64::INFINITY);
        assert!(t.rows[0].1[0].mean_psnr.is_finite());
        assert_eq!(t.to_csv().lines().count(), 3);
        assert_eq!(t.to_markdown().lines().count(), 4);
        assert!(eval_deblur(&ClassicalRenderer::default(), &s, &EvalOptions::default()).is_err());
    }

    #[test]
    fn csv_has_mean_rows() {
        let s = scenes();
        let r = eval_bokeh(&CopyInput, &s, &EvalOptions::default()).unwrap();
        let csv = reports_to_csv(&[r]);
        assert_eq!(csv.lines().next(), Some(REPORT_CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + 3 + 1);
        assert!(csv.lines().last().unwrap().starts_with("bokeh,copy-input,mean"));
    }
}
