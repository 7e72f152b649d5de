//! Refocus proxy-task training: pair sampling, cropping and the optimizer
//! loop. Data loading from disk lives in the `dc2` crate; everything here
//! works on in-memory scenes.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::warp;
use crate::dfnet::{Batch, Dfnet, ModelConfig, NetInput};
use crate::error::{check_dims, Error, Result};
use crate::image::Image;
use crate::loss::{loss_graph, FeatureExtractor, LossBreakdown, LossConfig, PerceptualBackend, RandomConvFeatures};
use crate::nn::{Adam, AdamConfig, Graph, Scalar, Tensor};
use crate::optics::{CameraIntrinsics, DepthMap};
use crate::synth::FocusStack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop: usize,
    pub steps1: usize,
    pub lr_phase1: f64,
    pub steps2: usize,
    pub lr_phase2: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            crop: 256,
            steps1: 2000,
            lr_phase1: 1e-4,
            steps2: 1000,
            lr_phase2: 1e-5,
            seed: 0,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || !self.crop.is_multiple_of(8) {
            return Err(Error::InvalidConfig(format!("crop {} must be a positive multiple of 8", self.crop)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.steps1 + self.steps2
    }

    /// Learning rate used for the update at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.steps1 {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }
}

/// One focus stack prepared for training and evaluation: every slice with
/// its defocus map, the aligned ultra-wide frame and its occlusion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneStack {
    pub aif: Image,
    pub slices: Vec<Image>,
    /// Defocus radii (pixels) of every slice.
    pub defocus: Vec<Image>,
    pub focus_mm: Vec<f64>,
    pub uw_warped: Image,
    pub occlusion: Image,
    pub depth: DepthMap,
    /// Wide camera the slices were captured with.
    pub camera: CameraIntrinsics,
}

impl SceneStack {
    /// Uses the oracle warp and the forward-backward occlusion estimate.
    pub fn from_stack(stack: &FocusStack, occlusion_threshold_px: f32) -> Self {
        let uw = stack.uw();
        Self {
            aif: stack.aif_image().clone(),
            slices: stack.slices.iter().map(|s| s.w_slice.clone()).collect(),
            defocus: stack.slices.iter().map(|s| s.defocus_w.radii.clone()).collect(),
            focus_mm: stack.focus_distances(),
            uw_warped: warp(&uw.frame, &uw.true_warp).image,
            occlusion: stack.estimated_occlusion(occlusion_threshold_px),
            depth: stack.scene.depth.clone(),
            camera: stack.rig.w_cam,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.aif.dims()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if self.slices.len() < 2 || self.slices.len() != self.defocus.len() || self.slices.len() != self.focus_mm.len() {
            return Err(Error::Domain(format!(
                "scene needs at least 2 slices with defocus maps, got {} slices / {} maps",
                self.slices.len(),
                self.defocus.len()
            )));
        }
        for img in self.slices.iter().chain(&self.defocus).chain([&self.uw_warped, &self.occlusion]) {
            check_dims(dims, img.dims())?;
        }
        check_dims(dims, self.depth.dims())?;
        check_dims(dims, self.camera.dims())?;
        Ok(())
    }

    /// Full-frame input pairing `w_image` with this scene's ultra-wide planes.
    pub fn net_input(&self, w_image: &Image, ref_defocus: &Image, tgt_defocus: &Image) -> Result<NetInput> {
        NetInput::full_frame(
            w_image.clone(),
            self.uw_warped.clone(),
            self.occlusion.clone(),
            ref_defocus.clone(),
            tgt_defocus.clone(),
        )
    }

    /// Network input for slice pair (`reference`, `target`) restricted to a
    /// window, with the target slice it should produce.
    pub fn pair_input(
        &self,
        reference: usize,
        target: usize,
        window: Option<(usize, usize, usize, usize)>,
    ) -> Result<(NetInput, Image)> {
        let full = self.net_input(&self.slices[reference], &self.defocus[reference], &self.defocus[target])?;
        match window {
            None => Ok((full, self.slices[target].clone())),
            Some((x0, y0, w, h)) => Ok((full.crop(x0, y0, w, h)?, self.slices[target].crop(x0, y0, w, h)?)),
        }
    }
}

/// Two distinct slice indices drawn uniformly without replacement,
/// `(reference, target)`.
pub fn sample_pair<R: Rng>(n_slices: usize, rng: &mut R) -> Result<(usize, usize)> {
    if n_slices < 2 {
        return Err(Error::Domain(format!("need at least 2 slices to sample a pair, got {n_slices}")));
    }
    let a = rng.random_range(0..n_slices);
    let mut b = rng.random_range(0..n_slices - 1);
    if b >= a {
        b += 1;
    }
    Ok((a, b))
}

/// A training example: network input and the expected output.
pub type Example = (NetInput, Image);

/// Crops every example at an independent random offset. All planes of an
/// example share the window; radial masks follow the full-image offset.
pub fn crop_batch<R: Rng>(examples: &[Example], crop: usize, rng: &mut R) -> Result<Vec<Example>> {
    examples
        .iter()
        .map(|(input, target)| {
            let (w, h) = input.dims();
            if crop > w || crop > h {
                return Err(Error::Domain(format!("crop {crop} exceeds image {w}x{h}")));
            }
            let x0 = rng.random_range(0..=w - crop);
            let y0 = rng.random_range(0..=h - crop);
            Ok((input.crop(x0, y0, crop, crop)?, target.crop(x0, y0, crop, crop)?))
        })
        .collect()
}

/// Loss of `model` on `examples` and the gradient of every parameter.
pub fn loss_and_gradients<T: Scalar>(
    model: &Dfnet<T>,
    examples: &[Example],
    loss: &LossConfig,
    features: Option<&dyn FeatureExtractor<T>>,
) -> Result<(LossBreakdown, Vec<Option<Tensor<T>>>)> {
    let inputs: Vec<&NetInput> = examples.iter().map(|e| &e.0).collect();
    let targets: Vec<&Image> = examples.iter().map(|e| &e.1).collect();
    let batch = Batch::<T>::from_inputs(&inputs, model.config().defocus_scale)?;
    let mut g = Graph::new(true);
    let out = model.forward_graph(&mut g, &batch);
    let tgt = g.input(Tensor::from_images(&targets));
    let lg = loss_graph(&mut g, &out.blended, tgt, loss, features);
    let breakdown = lg.breakdown(&g, &loss.weights);
    let mut grads = g.backward(lg.total);
    let per_param = out.params.iter().map(|&v| grads.take(v)).collect();
    Ok((breakdown, per_param))
}

/// Perceptual extractor selected by `backend`.
pub fn feature_extractor<T: Scalar>(backend: &PerceptualBackend) -> Option<RandomConvFeatures<T>> {
    match *backend {
        PerceptualBackend::RandomConv { seed } => Some(RandomConvFeatures::new(seed)),
        PerceptualBackend::Off => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Single-writer optimization loop over in-memory scenes.
pub struct Trainer {
    model: Dfnet<f32>,
    opt: Adam,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
    features: Option<RandomConvFeatures<f32>>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Dfnet::build(model_cfg)?;
        Ok(Self::from_model(model, cfg))
    }

    pub fn from_model(model: Dfnet<f32>, cfg: TrainConfig) -> Self {
        let opt = Adam::new(model.params(), cfg.adam);
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1),
            features: feature_extractor(&cfg.loss.perceptual),
            model,
            opt,
            cfg,
            step: 0,
        }
    }

    pub fn model(&self) -> &Dfnet<f32> {
        &self.model
    }

    pub fn into_model(self) -> Dfnet<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    /// Draws a batch: a random scene, a random slice pair and a random crop
    /// per example.
    pub fn sample_batch(&mut self, scenes: &[SceneStack]) -> Result<Vec<Example>> {
        if scenes.is_empty() {
            return Err(Error::Empty("training needs at least one scene"));
        }
        let crop = self.cfg.crop;
        (0..self.cfg.batch_size)
            .map(|_| {
                let s = &scenes[self.rng.random_range(0..scenes.len())];
                let (r, t) = sample_pair(s.slices.len(), &mut self.rng)?;
                let (w, h) = s.dims();
                if crop > w || crop > h {
                    return Err(Error::Domain(format!("crop {crop} exceeds image {w}x{h}")));
                }
                let x0 = self.rng.random_range(0..=w - crop);
                let y0 = self.rng.random_range(0..=h - crop);
                s.pair_input(r, t, Some((x0, y0, crop, crop)))
            })
            .collect()
    }

    /// One optimizer update on `examples` at the scheduled learning rate.
    pub fn step_on(&mut self, examples: &[Example]) -> Result<StepReport> {
        let lr = self.cfg.lr_at(self.step);
        let feats = self.features.as_ref().map(|f| f as &dyn FeatureExtractor<f32>);
        let (loss, grads) = loss_and_gradients(&self.model, examples, &self.cfg.loss, feats)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss became non-finite at step {}: {loss:?}",
                self.step
            )));
        }
        self.opt.step(self.model.params_mut(), &grads, lr);
        if !self.model.params().is_finite() {
            return Err(Error::NonFinite(format!("parameters became non-finite at step {}", self.step)));
        }
        let report = StepReport {
            step: self.step,
            lr,
            loss,
        };
        self.step += 1;
        Ok(report)
    }

    pub fn step(&mut self, scenes: &[SceneStack]) -> Result<StepReport> {
        let batch = self.sample_batch(scenes)?;
        self.step_on(&batch)
    }
}
