//! Multi-scale refocus objective: L1 on pixels, L1 on image gradients,
//! `1 - SSIM` and a perceptual feature distance, summed over all scales.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dfnet::{MultiScaleOutput, N_SCALES};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Graph, Scalar, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i32;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1_pixel: f64,
    pub l1_grad: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1_pixel: 1.0,
            l1_grad: 1.0,
            ssim: 1.0,
            perceptual: 1.0,
        }
    }
}

/// Perceptual feature backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PerceptualBackend {
    /// Fixed random-weight convolutional pyramid.
    RandomConv { seed: u64 },
    /// Perceptual term disabled (always 0).
    Off,
}

impl Default for PerceptualBackend {
    fn default() -> Self {
        PerceptualBackend::RandomConv { seed: 0x5EED }
    }
}

/// Anything that maps an image batch to a list of feature maps inside a
/// graph. Implement this to plug in a pretrained network.
pub trait FeatureExtractor<T: Scalar> {
    fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var>;
}

/// Three stride-2 3x3 convolutions with leaky ReLU and frozen random
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomConvFeatures<T> {
    layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> RandomConvFeatures<T> {
    pub const CHANNELS: [usize; 3] = [8, 16, 16];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for &cout in &Self::CHANNELS {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let w = (0..cout * cin * 9).map(|_| T::of(rng.random_range(-bound..bound))).collect();
            let b = (0..cout).map(|_| T::of(rng.random_range(-0.1..0.1))).collect();
            layers.push((Tensor::from_vec([cout, cin, 3, 3], w), Tensor::from_vec([cout, 1, 1, 1], b)));
            cin = cout;
        }
        Self { layers }
    }
}

impl<T: Scalar> FeatureExtractor<T> for RandomConvFeatures<T> {
    fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            let (wv, bv) = (g.input(w.clone()), g.input(b.clone()));
            let y = g.conv2d(h, wv, Some(bv), 2, 1, 1);
            h = g.leaky_relu(y, 0.2);
            out.push(h);
        }
        out
    }
}

/// Loss configuration shared by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub perceptual: PerceptualBackend,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScaleLoss {
    pub l1_pixel: f64,
    pub l1_grad: f64,
    /// `1 - SSIM`.
    pub ssim: f64,
    pub perceptual: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Coarsest scale first.
    pub per_scale: Vec<ScaleLoss>,
    pub l1_pixel: f64,
    pub l1_grad: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l1_pixel, self.l1_grad, self.ssim, self.perceptual, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

struct ScaleVars {
    l1_pixel: Var,
    l1_grad: Var,
    ssim: Var,
    perceptual: Option<Var>,
}

/// The loss as graph nodes, ready for backpropagation.
pub struct LossGraph {
    pub total: Var,
    scales: Vec<ScaleVars>,
}

impl LossGraph {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, weights: &LossWeights) -> LossBreakdown {
        let read = |v: Var| g.value(v).item().f64();
        let mut out = LossBreakdown::default();
        for s in &self.scales {
            let mut sl = ScaleLoss {
                l1_pixel: read(s.l1_pixel),
                l1_grad: read(s.l1_grad),
                ssim: read(s.ssim),
                perceptual: s.perceptual.map(read).unwrap_or(0.0),
                total: 0.0,
            };
            sl.total = weights.l1_pixel * sl.l1_pixel
                + weights.l1_grad * sl.l1_grad
                + weights.ssim * sl.ssim
                + weights.perceptual * sl.perceptual;
            out.l1_pixel += sl.l1_pixel;
            out.l1_grad += sl.l1_grad;
            out.ssim += sl.ssim;
            out.perceptual += sl.perceptual;
            out.total += sl.total;
            out.per_scale.push(sl);
        }
        out
    }
}

/// `1 - mean SSIM` between two batches inside the graph.
pub fn ssim_loss_graph<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var) -> Var {
    let taps = ssim_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_x = g.blur(x, &taps);
    let mu_y = g.blur(y, &taps);
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let e_xx = g.blur(xx, &taps);
    let e_yy = g.blur(yy, &taps);
    let e_xy = g.blur(xy, &taps);
    let mx2 = g.mul(mu_x, mu_x);
    let my2 = g.mul(mu_y, mu_y);
    let mxy = g.mul(mu_x, mu_y);
    let var_x = g.sub(e_xx, mx2);
    let var_y = g.sub(e_yy, my2);
    let cov = g.sub(e_xy, mxy);
    let n1 = g.scale(mxy, 2.0);
    let n1 = g.add_scalar(n1, c1);
    let n2 = g.scale(cov, 2.0);
    let n2 = g.add_scalar(n2, c2);
    let d1 = g.add(mx2, my2);
    let d1 = g.add_scalar(d1, c1);
    let d2 = g.add(var_x, var_y);
    let d2 = g.add_scalar(d2, c2);
    let num = g.mul(n1, n2);
    let den = g.mul(d1, d2);
    let map = g.div(num, den);
    let m = g.mean(map);
    g.one_minus(m)
}

fn l1_diff<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    g.mean_abs(d)
}

/// Builds the loss of per-scale predictions (`outputs`, coarsest first)
/// against the full-resolution `target`, which is area-downsampled to every
/// scale.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    outputs: &[Var],
    target: Var,
    cfg: &LossConfig,
    features: Option<&dyn FeatureExtractor<T>>,
) -> LossGraph {
    let mut targets = vec![target];
    for _ in 1..outputs.len() {
        let next = g.avg_pool2(*targets.last().unwrap());
        targets.push(next);
    }
    targets.reverse();
    let w = &cfg.weights;
    let mut scales = Vec::new();
    let mut total: Option<Var> = None;
    for (&out, &tgt) in outputs.iter().zip(&targets) {
        let l1_pixel = l1_diff(g, out, tgt);
        let (ox, tx) = (g.diff_x(out), g.diff_x(tgt));
        let (oy, ty) = (g.diff_y(out), g.diff_y(tgt));
        let gx = l1_diff(g, ox, tx);
        let gy = l1_diff(g, oy, ty);
        let gsum = g.add(gx, gy);
        let l1_grad = g.scale(gsum, 0.5);
        let ssim = ssim_loss_graph(g, out, tgt);
        let perceptual = features.map(|f| {
            let fo = f.features(g, out);
            let ft = f.features(g, tgt);
            let mut acc: Option<Var> = None;
            for (a, b) in fo.iter().zip(&ft) {
                let d = l1_diff(g, *a, *b);
                acc = Some(match acc {
                    None => d,
                    Some(prev) => g.add(prev, d),
                });
            }
            let acc = acc.expect("at least one feature stage");
            g.scale(acc, 1.0 / fo.len() as f64)
        });
        let mut terms = vec![g.scale(l1_pixel, w.l1_pixel), g.scale(l1_grad, w.l1_grad), g.scale(ssim, w.ssim)];
        if let Some(p) = perceptual {
            terms.push(g.scale(p, w.perceptual));
        }
        for t in terms {
            total = Some(match total {
                None => t,
                Some(prev) => g.add(prev, t),
            });
        }
        scales.push(ScaleVars {
            l1_pixel,
            l1_grad,
            ssim,
            perceptual,
        });
    }
    LossGraph {
        total: total.expect("at least one scale"),
        scales,
    }
}

/// Evaluates the loss of a finished forward pass against `target_w` (full
/// resolution).
pub fn loss_total(output: &MultiScaleOutput, target_w: &Image, cfg: &LossConfig) -> Result<LossBreakdown> {
    if output.blended.len() != N_SCALES {
        return Err(Error::InvalidConfig(format!("expected {N_SCALES} scales")));
    }
    let full = output.blended.last().unwrap();
    if full.dims() != target_w.dims() || full.channels() != target_w.channels() {
        return Err(Error::DimensionMismatch {
            expected: full.dims(),
            found: target_w.dims(),
        });
    }
    let mut g = Graph::<f64>::new(false);
    let outs: Vec<Var> = output
        .blended
        .iter()
        .map(|img| g.input(Tensor::from_images(&[img])))
        .collect();
    let tgt = g.input(Tensor::from_images(&[target_w]));
    let feats = match cfg.perceptual {
        PerceptualBackend::RandomConv { seed } => Some(RandomConvFeatures::<f64>::new(seed)),
        PerceptualBackend::Off => None,
    };
    let lg = loss_graph(
        &mut g,
        &outs,
        tgt,
        cfg,
        feats.as_ref().map(|f| f as &dyn FeatureExtractor<f64>),
    );
    Ok(lg.breakdown(&g, &cfg.weights))
}

/// Area-downsampled pyramid of `img`, coarsest first, matching the network's
/// output scales.
pub fn target_pyramid(img: &Image) -> Vec<Image> {
    let mut levels = vec![img.clone()];
    for _ in 1..N_SCALES {
        let next = levels.last().unwrap().downsample2();
        levels.push(next);
    }
    levels.reverse();
    levels
}
