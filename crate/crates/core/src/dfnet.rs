//! Detail fusion network.
//!
//! Two refinement paths (one for the wide frame, one for the aligned
//! ultra-wide frame) each turn their image into a four-scale pyramid of
//! refined images by predicting per-pixel 3x3 kernels, gates and residuals on
//! top of an encoder-decoder. A fusion module of ASPP blocks then predicts,
//! coarse to fine, a two-channel blending mask per scale; the masks are
//! softmax-normalized so the blended output is a convex combination of the
//! two refined images.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::image::Image;
use crate::nn::{Graph, ParamStore, Scalar, Tensor, Var};

/// Number of output scales: 1/8, 1/4, 1/2 and full resolution.
pub const N_SCALES: usize = 4;
const LEAK: f64 = 0.2;
/// Taps of a refinement head: 9 kernel weights, 1 gate, 3 residual channels.
const HEAD_CHANNELS: usize = 13;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsppSpec {
    pub atrous_rates: Vec<usize>,
    pub channels: Vec<usize>,
}

impl AsppSpec {
    pub fn new(atrous_rates: &[usize], channels: &[usize]) -> Self {
        Self {
            atrous_rates: atrous_rates.to_vec(),
            channels: channels.to_vec(),
        }
    }
}

/// Which refinement paths the model contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathSelection {
    Both,
    /// Wide path only; the output is the refined wide image.
    WOnly,
    /// Ultra-wide path only; the wide frame is never read.
    UwOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub n_scales: usize,
    /// Convolutions per encoder level.
    pub refine_depth: usize,
    /// One block per scale, coarsest first.
    pub aspp: Vec<AsppSpec>,
    pub use_occlusion_input: bool,
    pub use_radial_mask: bool,
    pub paths: PathSelection,
    /// Multiplier applied to defocus radii (pixels) before they enter the
    /// network.
    pub defocus_scale: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            n_scales: N_SCALES,
            refine_depth: 2,
            aspp: vec![
                AsppSpec::new(&[1, 3, 5], &[16, 32, 2]),
                AsppSpec::new(&[1, 3, 6, 12], &[16, 32, 2]),
                AsppSpec::new(&[1, 3, 6, 12, 15], &[16, 32, 2]),
                AsppSpec::new(&[1, 3, 6, 12, 15, 18], &[16, 32, 32, 2]),
            ],
            use_occlusion_input: true,
            use_radial_mask: true,
            paths: PathSelection::Both,
            defocus_scale: 0.125,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and desk-scale training: 4 base
    /// channels, the default atrous rates, narrower ASPP stages.
    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            refine_depth: 1,
            aspp: vec![
                AsppSpec::new(&[1, 3, 5], &[4, 4, 2]),
                AsppSpec::new(&[1, 3, 6, 12], &[4, 4, 2]),
                AsppSpec::new(&[1, 3, 6, 12, 15], &[4, 4, 2]),
                AsppSpec::new(&[1, 3, 6, 12, 15, 18], &[4, 4, 4, 2]),
            ],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scales != N_SCALES {
            return Err(Error::InvalidConfig(format!("n_scales must be {N_SCALES}, got {}", self.n_scales)));
        }
        if self.base_channels == 0 || self.refine_depth == 0 {
            return Err(Error::InvalidConfig("base_channels and refine_depth must be positive".into()));
        }
        if self.aspp.len() != N_SCALES {
            return Err(Error::InvalidConfig(format!("expected {N_SCALES} ASPP blocks, got {}", self.aspp.len())));
        }
        for (i, spec) in self.aspp.iter().enumerate() {
            if spec.atrous_rates.is_empty() || spec.atrous_rates.contains(&0) {
                return Err(Error::InvalidConfig(format!("ASPP block {i}: rates must be positive and non-empty")));
            }
            if spec.channels.last() != Some(&2) || spec.channels.contains(&0) {
                return Err(Error::InvalidConfig(format!(
                    "ASPP block {i}: channel list must be positive and end with 2, got {:?}",
                    spec.channels
                )));
            }
        }
        if !(self.defocus_scale > 0.0 && self.defocus_scale.is_finite()) {
            return Err(Error::InvalidConfig("defocus_scale must be positive".into()));
        }
        Ok(())
    }

    /// Input channels of the wide path: image, reference and target
    /// defocus, radial mask.
    pub fn w_input_channels(&self) -> usize {
        3 + 1 + 1 + usize::from(self.use_radial_mask)
    }

    /// Input channels of the ultra-wide path: image, occlusion, target
    /// defocus, radial mask.
    pub fn uw_input_channels(&self) -> usize {
        3 + usize::from(self.use_occlusion_input) + 1 + usize::from(self.use_radial_mask)
    }

    fn has_w(&self) -> bool {
        self.paths != PathSelection::UwOnly
    }

    fn has_uw(&self) -> bool {
        self.paths != PathSelection::WOnly
    }
}

/// Normalized distance of every crop pixel from the full-image centre
/// `(W/2, H/2)`; the full-image half-diagonal maps to 1.
pub fn radial_mask(
    full_dims: (usize, usize),
    crop_offset: (usize, usize),
    crop_dims: (usize, usize),
) -> Result<Image> {
    let (fw, fh) = full_dims;
    let (ox, oy) = crop_offset;
    let (cw, ch) = crop_dims;
    if fw == 0 || fh == 0 || ox + cw > fw || oy + ch > fh {
        return Err(Error::Domain(format!(
            "crop {cw}x{ch}+{ox}+{oy} outside {fw}x{fh} image"
        )));
    }
    let (cx, cy) = (fw as f64 / 2.0, fh as f64 / 2.0);
    let half_diag = (cx * cx + cy * cy).sqrt();
    Ok(Image::from_fn(cw, ch, 1, |_, x, y| {
        let dx = (ox + x) as f64 - cx;
        let dy = (oy + y) as f64 - cy;
        ((dx * dx + dy * dy).sqrt() / half_diag) as f32
    }))
}

/// All planes the network consumes for one image (or crop).
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub w_image: Image,
    pub uw_warped: Image,
    pub occlusion_mask: Image,
    /// Defocus radii in pixels.
    pub ref_defocus: Image,
    pub tgt_defocus: Image,
    pub radial_mask: Image,
    pub crop_offset: (usize, usize),
    pub full_image_dims: (usize, usize),
}

impl NetInput {
    /// Assembles an input covering a whole image; the radial mask is
    /// computed from the image dimensions.
    pub fn full_frame(
        w_image: Image,
        uw_warped: Image,
        occlusion_mask: Image,
        ref_defocus: Image,
        tgt_defocus: Image,
    ) -> Result<Self> {
        let dims = w_image.dims();
        let input = Self {
            radial_mask: radial_mask(dims, (0, 0), dims)?,
            w_image,
            uw_warped,
            occlusion_mask,
            ref_defocus,
            tgt_defocus,
            crop_offset: (0, 0),
            full_image_dims: dims,
        };
        input.validate()?;
        Ok(input)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.w_image.dims()
    }

    /// Window of this input at `(x0, y0)` with its own radial mask.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        let (ox, oy) = self.crop_offset;
        Ok(Self {
            w_image: self.w_image.crop(x0, y0, w, h)?,
            uw_warped: self.uw_warped.crop(x0, y0, w, h)?,
            occlusion_mask: self.occlusion_mask.crop(x0, y0, w, h)?,
            ref_defocus: self.ref_defocus.crop(x0, y0, w, h)?,
            tgt_defocus: self.tgt_defocus.crop(x0, y0, w, h)?,
            radial_mask: radial_mask(self.full_image_dims, (ox + x0, oy + y0), (w, h))?,
            crop_offset: (ox + x0, oy + y0),
            full_image_dims: self.full_image_dims,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        let planes: [(&Image, usize, &str); 6] = [
            (&self.w_image, 3, "w_image"),
            (&self.uw_warped, 3, "uw_warped"),
            (&self.occlusion_mask, 1, "occlusion_mask"),
            (&self.ref_defocus, 1, "ref_defocus"),
            (&self.tgt_defocus, 1, "tgt_defocus"),
            (&self.radial_mask, 1, "radial_mask"),
        ];
        for (img, channels, name) in planes {
            check_dims(dims, img.dims())?;
            if img.channels() != channels {
                return Err(Error::InvalidConfig(format!(
                    "{name} must have {channels} channels, got {}",
                    img.channels()
                )));
            }
        }
        for (img, name) in [(&self.ref_defocus, "ref_defocus"), (&self.tgt_defocus, "tgt_defocus")] {
            if img.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Domain(format!("{name} must be finite and non-negative")));
            }
        }
        if !dims.0.is_multiple_of(8) || !dims.1.is_multiple_of(8) || dims.0 == 0 || dims.1 == 0 {
            return Err(Error::Domain(format!(
                "input dimensions {}x{} must be positive multiples of 8",
                dims.0, dims.1
            )));
        }
        Ok(())
    }
}

/// Per-scale network outputs, coarsest (1/8) first.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleOutput {
    pub refined_w: Vec<Image>,
    pub refined_uw: Vec<Image>,
    /// Two channels per scale: wide weight, ultra-wide weight.
    pub masks: Vec<Image>,
    pub blended: Vec<Image>,
}

impl MultiScaleOutput {
    /// Full-resolution blended image.
    pub fn output(&self) -> &Image {
        &self.blended[N_SCALES - 1]
    }
}

/// Full-resolution intermediates for visualization.
#[derive(Debug, Clone, PartialEq)]
pub struct Intermediates {
    pub refined_w: Image,
    pub refined_uw: Image,
    pub mask_w: Image,
    pub mask_uw: Image,
}

/// Batched network input tensors.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub w_image: Tensor<T>,
    pub uw_warped: Tensor<T>,
    pub occlusion: Tensor<T>,
    pub ref_defocus: Tensor<T>,
    pub tgt_defocus: Tensor<T>,
    pub radial: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_inputs(inputs: &[&NetInput], defocus_scale: f32) -> Result<Self> {
        let first = inputs.first().ok_or(Error::Empty("empty batch"))?;
        for inp in inputs {
            inp.validate()?;
            check_dims(first.dims(), inp.dims())?;
        }
        let stack = |f: &dyn Fn(&NetInput) -> &Image| {
            let imgs: Vec<&Image> = inputs.iter().map(|i| f(i)).collect();
            Tensor::from_images(&imgs)
        };
        let scaled = |f: &dyn Fn(&NetInput) -> &Image| {
            let mut t: Tensor<T> = stack(f);
            let k = T::of(defocus_scale as f64);
            t.data.iter_mut().for_each(|v| *v *= k);
            t
        };
        Ok(Self {
            w_image: stack(&|i| &i.w_image),
            uw_warped: stack(&|i| &i.uw_warped),
            occlusion: stack(&|i| &i.occlusion_mask),
            ref_defocus: scaled(&|i| &i.ref_defocus),
            tgt_defocus: scaled(&|i| &i.tgt_defocus),
            radial: stack(&|i| &i.radial_mask),
        })
    }
}

/// Graph handles of one forward pass, coarsest scale first.
#[derive(Debug, Clone)]
pub struct GraphOutput {
    pub refined_w: Vec<Var>,
    pub refined_uw: Vec<Var>,
    pub masks: Vec<Var>,
    pub blended: Vec<Var>,
    /// Graph leaf of every model parameter, in store order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
}

impl Conv {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Var {
        g.conv2d(x, pv[self.w], Some(pv[self.b]), self.stride, self.dilation, self.pad)
    }

    fn apply_act<T: Scalar>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Var {
        let y = self.apply(g, pv, x);
        g.leaky_relu(y, LEAK)
    }
}

struct Builder {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Builder {
    /// Fan-in scaled uniform init (He bound times `gain`), bias `bias`.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        gain: f64,
        bias: &[f64],
    ) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        let n = cout * cin * k * k;
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let w = self.store.push(format!("{name}.weight"), Tensor::from_vec([cout, cin, k, k], data));
        let mut bv = vec![0.0; cout];
        for (dst, src) in bv.iter_mut().zip(bias) {
            *dst = *src;
        }
        let b = self.store.push(format!("{name}.bias"), Tensor::from_vec([cout, 1, 1, 1], bv));
        Conv {
            w,
            b,
            stride,
            dilation,
            pad: dilation * (k - 1) / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RefinePath {
    enc_full: Vec<Conv>,
    /// Per coarser level: a stride-2 conv followed by `refine_depth - 1`
    /// convs.
    enc_down: Vec<Vec<Conv>>,
    bottleneck: Conv,
    /// Decoders for 1/4, 1/2 and full resolution.
    dec: Vec<Conv>,
    /// Heads for every scale, coarsest first.
    heads: Vec<Conv>,
}

impl RefinePath {
    fn build(b: &mut Builder, prefix: &str, cin: usize, cfg: &ModelConfig) -> Self {
        let c = cfg.base_channels;
        let c2 = 2 * c;
        let mut enc_full = vec![b.conv(&format!("{prefix}.enc0.0"), cin, c, 3, 1, 1, 1.0, &[])];
        for i in 1..cfg.refine_depth {
            enc_full.push(b.conv(&format!("{prefix}.enc0.{i}"), c, c, 3, 1, 1, 1.0, &[]));
        }
        let mut enc_down = Vec::new();
        let mut prev = c;
        for level in 1..N_SCALES {
            let mut convs = vec![b.conv(&format!("{prefix}.enc{level}.0"), prev, c2, 3, 2, 1, 1.0, &[])];
            for i in 1..cfg.refine_depth {
                convs.push(b.conv(&format!("{prefix}.enc{level}.{i}"), c2, c2, 3, 1, 1, 1.0, &[]));
            }
            enc_down.push(convs);
            prev = c2;
        }
        let bottleneck = b.conv(&format!("{prefix}.bottleneck"), c2, c2, 3, 1, 1, 1.0, &[]);
        let dec = vec![
            b.conv(&format!("{prefix}.dec2"), c2 + c2, c2, 3, 1, 1, 1.0, &[]),
            b.conv(&format!("{prefix}.dec1"), c2 + c2, c2, 3, 1, 1, 1.0, &[]),
            b.conv(&format!("{prefix}.dec0"), c2 + c, c, 3, 1, 1, 1.0, &[]),
        ];
        // Heads start close to the identity: zero kernel delta, gate open
        // towards the current scale, zero residual.
        let mut head_bias = [0.0; HEAD_CHANNELS];
        head_bias[9] = 2.0;
        let heads = (0..N_SCALES)
            .map(|s| {
                let cin = if s == N_SCALES - 1 { c } else { c2 };
                b.conv(&format!("{prefix}.head{s}"), cin, HEAD_CHANNELS, 3, 1, 1, 0.1, &head_bias)
            })
            .collect();
        Self {
            enc_full,
            enc_down,
            bottleneck,
            dec,
            heads,
        }
    }

    /// `bases` are the path's image at every scale, coarsest first.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, pv: &[Var], x: Var, bases: &[Var]) -> Vec<Var> {
        let mut e = x;
        for conv in &self.enc_full {
            e = conv.apply_act(g, pv, e);
        }
        let mut skips = vec![e];
        for convs in &self.enc_down {
            for conv in convs {
                e = conv.apply_act(g, pv, e);
            }
            skips.push(e);
        }
        let mut d = self.bottleneck.apply_act(g, pv, e);
        let mut feats = vec![d];
        for (i, conv) in self.dec.iter().enumerate() {
            let up = g.upsample2(d);
            let cat = g.concat(&[up, skips[N_SCALES - 2 - i]]);
            d = conv.apply_act(g, pv, cat);
            feats.push(d);
        }
        let mut refined: Vec<Var> = Vec::with_capacity(N_SCALES);
        for s in 0..N_SCALES {
            let h = self.heads[s].apply(g, pv, feats[s]);
            let delta = g.narrow(h, 0, 9);
            let residual = g.narrow(h, 10, 3);
            let filtered = g.apply_kernel3(bases[s], delta);
            let filtered = g.add(filtered, bases[s]);
            let out = if s == 0 {
                g.add(filtered, residual)
            } else {
                let gate_logit = g.narrow(h, 9, 1);
                let gate = g.sigmoid(gate_logit);
                let rest = g.one_minus(gate);
                let up = g.upsample2(refined[s - 1]);
                let a = g.mul_c(filtered, gate);
                let b = g.mul_c(up, rest);
                let ab = g.add(a, b);
                g.add(ab, residual)
            };
            refined.push(out);
        }
        refined
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AsppStage {
    branches: Vec<Conv>,
    project: Conv,
}

#[derive(Debug, Clone, PartialEq)]
struct AsppBlock {
    stages: Vec<AsppStage>,
}

impl AsppBlock {
    fn build(b: &mut Builder, prefix: &str, cin: usize, spec: &AsppSpec, coarsest: bool) -> Self {
        let mut stages = Vec::new();
        let mut prev = cin;
        let n_stages = spec.channels.len();
        for (j, &ch) in spec.channels.iter().enumerate() {
            let last = j + 1 == n_stages;
            // The final stage mixes branches of the previous width down to
            // the two mask logits.
            let width = if last && j > 0 { spec.channels[j - 1] } else { ch };
            let branches = spec
                .atrous_rates
                .iter()
                .map(|&r| b.conv(&format!("{prefix}.stage{j}.rate{r}"), prev, width, 3, 1, r, 1.0, &[]))
                .collect();
            let (gain, bias): (f64, &[f64]) = match (last, coarsest) {
                (true, true) => (0.1, &[core::f64::consts::LN_2 * 2.0, 0.0]),
                (true, false) => (0.1, &[]),
                _ => (1.0, &[]),
            };
            let project = b.conv(
                &format!("{prefix}.stage{j}.project"),
                width * spec.atrous_rates.len(),
                ch,
                1,
                1,
                1,
                gain,
                bias,
            );
            stages.push(AsppStage { branches, project });
            prev = ch;
        }
        Self { stages }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Var {
        let mut h = x;
        let n = self.stages.len();
        for (j, stage) in self.stages.iter().enumerate() {
            let outs: Vec<Var> = stage.branches.iter().map(|c| c.apply(g, pv, h)).collect();
            let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs) };
            let cat = g.leaky_relu(cat, LEAK);
            h = stage.project.apply(g, pv, cat);
            if j + 1 < n {
                h = g.leaky_relu(h, LEAK);
            }
        }
        h
    }
}

/// The detail fusion network with parameters of type `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dfnet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    w_path: Option<RefinePath>,
    uw_path: Option<RefinePath>,
    fusion: Option<Vec<AsppBlock>>,
}

impl<T: Scalar> Dfnet<T> {
    /// Builds a freshly initialized model; initialization is determined by
    /// `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let w_path = config
            .has_w()
            .then(|| RefinePath::build(&mut b, "w", config.w_input_channels(), config));
        let uw_path = config
            .has_uw()
            .then(|| RefinePath::build(&mut b, "uw", config.uw_input_channels(), config));
        let fusion = (config.paths == PathSelection::Both).then(|| {
            (0..N_SCALES)
                .map(|s| {
                    let cin = fusion_input_channels(config, s);
                    AsppBlock::build(&mut b, &format!("fusion{s}"), cin, &config.aspp[s], s == 0)
                })
                .collect()
        });
        Ok(Self {
            config: config.clone(),
            params: b.store.cast(),
            w_path,
            uw_path,
            fusion,
        })
    }

    /// Replaces the parameters of a freshly built model after checking that
    /// names and shapes match.
    pub fn from_params(config: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::build(config)?;
        if model.params.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((name, fresh), (got_name, got)) in model.params.iter().zip(params.iter()) {
            if name != got_name || fresh.shape != got.shape {
                return Err(Error::InvalidConfig(format!(
                    "parameter mismatch: expected {name} {:?}, got {got_name} {:?}",
                    fresh.shape, got.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Dfnet<U> {
        Dfnet {
            config: self.config.clone(),
            params: self.params.cast(),
            w_path: self.w_path.clone(),
            uw_path: self.uw_path.clone(),
            fusion: self.fusion.clone(),
        }
    }

    /// Appends the forward pass to `g`. Parameters become differentiable
    /// leaves when `g` tracks gradients.
    pub fn forward_graph(&self, g: &mut Graph<T>, batch: &Batch<T>) -> GraphOutput {
        let pv: Vec<Var> = (0..self.params.len()).map(|i| g.param(self.params.get(i).clone())).collect();
        let cfg = &self.config;
        let pyramid = |g: &mut Graph<T>, t: &Tensor<T>| -> Vec<Var> {
            let mut levels = vec![g.input(t.clone())];
            for _ in 1..N_SCALES {
                let next = g.avg_pool2(*levels.last().unwrap());
                levels.push(next);
            }
            levels.reverse();
            levels
        };
        let w_img = pyramid(g, &batch.w_image);
        let uw_img = pyramid(g, &batch.uw_warped);
        let occ = pyramid(g, &batch.occlusion);
        let refd = pyramid(g, &batch.ref_defocus);
        let tgtd = pyramid(g, &batch.tgt_defocus);
        let radial = pyramid(g, &batch.radial);
        let full = N_SCALES - 1;

        let refined_w = self.w_path.as_ref().map(|path| {
            let mut planes = vec![w_img[full], refd[full], tgtd[full]];
            if cfg.use_radial_mask {
                planes.push(radial[full]);
            }
            let x = g.concat(&planes);
            path.forward(g, &pv, x, &w_img)
        });
        let refined_uw = self.uw_path.as_ref().map(|path| {
            let mut planes = vec![uw_img[full]];
            if cfg.use_occlusion_input {
                planes.push(occ[full]);
            }
            planes.push(tgtd[full]);
            if cfg.use_radial_mask {
                planes.push(radial[full]);
            }
            let x = g.concat(&planes);
            path.forward(g, &pv, x, &uw_img)
        });

        let (refined_w, refined_uw, masks, blended) = match (refined_w, refined_uw, &self.fusion) {
            (Some(rw), Some(ruw), Some(blocks)) => {
                let mut masks = Vec::with_capacity(N_SCALES);
                let mut blended = Vec::with_capacity(N_SCALES);
                let mut prev: Option<(Var, Var)> = None;
                for s in 0..N_SCALES {
                    let mut planes = vec![rw[s], ruw[s]];
                    if cfg.use_occlusion_input {
                        planes.push(occ[s]);
                    }
                    if cfg.use_radial_mask {
                        planes.push(radial[s]);
                    }
                    planes.push(refd[s]);
                    planes.push(tgtd[s]);
                    let up_prev = prev.map(|(_, mask)| g.upsample2(mask));
                    if let Some(u) = up_prev {
                        planes.push(u);
                    }
                    let x = g.concat(&planes);
                    let mut logits = blocks[s].forward(g, &pv, x);
                    if let Some((prev_logits, _)) = prev {
                        let up = g.upsample2(prev_logits);
                        logits = g.add(logits, up);
                    }
                    let mask = g.softmax_c(logits);
                    let m_w = g.narrow(mask, 0, 1);
                    let m_uw = g.narrow(mask, 1, 1);
                    let a = g.mul_c(rw[s], m_w);
                    let b = g.mul_c(ruw[s], m_uw);
                    blended.push(g.add(a, b));
                    masks.push(mask);
                    prev = Some((logits, mask));
                }
                (rw, ruw, masks, blended)
            }
            (Some(only), None, _) | (None, Some(only), _) => {
                let w_side = cfg.paths == PathSelection::WOnly;
                let masks = only
                    .iter()
                    .map(|&v| {
                        let [n, _, h, w] = g.shape(v);
                        let p = h * w;
                        let mut t = Tensor::zeros([n, 2, h, w]);
                        for ni in 0..n {
                            let ch = if w_side { 0 } else { 1 };
                            t.data[(ni * 2 + ch) * p..(ni * 2 + ch + 1) * p]
                                .iter_mut()
                                .for_each(|x| *x = T::one());
                        }
                        g.input(t)
                    })
                    .collect();
                (only.clone(), only.clone(), masks, only)
            }
            _ => unreachable!("validated path selection"),
        };
        GraphOutput {
            refined_w,
            refined_uw,
            masks,
            blended,
            params: pv,
        }
    }

    /// Inference on a batch of inputs of equal size.
    pub fn forward_batch(&self, inputs: &[&NetInput]) -> Result<Vec<MultiScaleOutput>> {
        let batch = Batch::from_inputs(inputs, self.config.defocus_scale)?;
        let mut g = Graph::new(false);
        let out = self.forward_graph(&mut g, &batch);
        let collect = |vars: &[Var], i: usize| -> Vec<Image> { vars.iter().map(|&v| g.value(v).to_image(i)).collect() };
        Ok((0..inputs.len())
            .map(|i| MultiScaleOutput {
                refined_w: collect(&out.refined_w, i),
                refined_uw: collect(&out.refined_uw, i),
                masks: collect(&out.masks, i),
                blended: collect(&out.blended, i),
            })
            .collect())
    }

    pub fn forward(&self, input: &NetInput) -> Result<MultiScaleOutput> {
        Ok(self.forward_batch(&[input])?.remove(0))
    }

    /// Full-resolution refined images and masks, read from the same forward
    /// pass as [`Dfnet::forward`].
    pub fn inspect(&self, input: &NetInput) -> Result<Intermediates> {
        let out = self.forward(input)?;
        let full = N_SCALES - 1;
        Ok(Intermediates {
            refined_w: out.refined_w[full].clone(),
            refined_uw: out.refined_uw[full].clone(),
            mask_w: out.masks[full].channel(0),
            mask_uw: out.masks[full].channel(1),
        })
    }
}

fn fusion_input_channels(cfg: &ModelConfig, s: usize) -> usize {
    3 + 3
        + usize::from(cfg.use_occlusion_input)
        + usize::from(cfg.use_radial_mask)
        + 2
        + if s > 0 { 2 } else { 0 }
}

/// Random finite input of the given size, for tests and benchmarks.
pub fn random_input(width: usize, height: usize, seed: u64) -> Result<NetInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plane = |c: usize, lo: f32, hi: f32| {
        let data = (0..width * height * c).map(|_| rng.random_range(lo..hi)).collect();
        Image::from_vec(width, height, c, data)
    };
    let w_image = plane(3, 0.0, 1.0)?;
    let uw_warped = plane(3, 0.0, 1.0)?;
    let occlusion = plane(1, 0.0, 1.0)?.map(|v| if v > 0.8 { 1.0 } else { 0.0 });
    let ref_defocus = plane(1, 0.0, 6.0)?;
    let tgt_defocus = plane(1, 0.0, 6.0)?;
    NetInput::full_frame(w_image, uw_warped, occlusion, ref_defocus, tgt_defocus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radial_mask_examples() {
        let m = radial_mask((1024, 768), (0, 0), (256, 256)).unwrap();
        assert_eq!(m.get(0, 0, 0), 1.0);
        let full = radial_mask((64, 48), (0, 0), (64, 48)).unwrap();
        assert_eq!(full.get(0, 32, 24), 0.0);
        assert_eq!(full.get(0, 0, 0), 1.0);
        assert!(radial_mask((64, 48), (40, 0), (32, 8)).is_err());
    }

    #[test]
    fn channel_accounting() {
        let cfg = ModelConfig::default();
        assert_eq!((cfg.w_input_channels(), cfg.uw_input_channels()), (6, 6));
        let no_radial = ModelConfig {
            use_radial_mask: false,
            ..ModelConfig::default()
        };
        assert_eq!((no_radial.w_input_channels(), no_radial.uw_input_channels()), (5, 5));
    }

    #[test]
    fn invalid_aspp_specs_are_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.aspp[2].channels = vec![4, 3];
        assert!(Dfnet::<f32>::build(&cfg).is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.aspp.pop();
        assert!(Dfnet::<f32>::build(&cfg).is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.aspp[0].atrous_rates = vec![];
        assert!(Dfnet::<f32>::build(&cfg).is_err());
    }

    #[test]
    fn builds_are_deterministic() {
        let a = Dfnet::<f32>::build(&ModelConfig::tiny()).unwrap();
        let b = Dfnet::<f32>::build(&ModelConfig::tiny()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Dfnet::<f32>::build(&ModelConfig {
            seed: 1,
            ..ModelConfig::tiny()
        })
        .unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn output_shapes_and_mask_normalization() {
        let model = Dfnet::<f32>::build(&ModelConfig::tiny()).unwrap();
        let input = random_input(32, 24, 3).unwrap();
        let out = model.forward(&input).unwrap();
        let expected = [(4, 3), (8, 6), (16, 12), (32, 24)];
        for s in 0..N_SCALES {
            assert_eq!(out.blended[s].dims(), expected[s]);
            let m = &out.masks[s];
            for i in 0..m.width() * m.height() {
                let sum = m.plane(0)[i] + m.plane(1)[i];
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
        assert!(out.output().is_finite());
    }

    #[test]
    fn untrained_model_favours_wide_and_passes_it_through() {
        let model = Dfnet::<f32>::build(&ModelConfig::tiny()).unwrap();
        let input = random_input(32, 32, 4).unwrap();
        let out = model.forward(&input).unwrap();
        let mean_w = out.masks[N_SCALES - 1].channel(0).mean();
        assert!((0.7..0.9).contains(&mean_w), "mask_w mean {mean_w}");
    }

    #[test]
    fn inputs_must_be_multiples_of_eight() {
        assert!(random_input(30, 24, 0).is_err());
    }
}
