//! Synthetic dual-camera capture.
//!
//! Scenes are stacks of fronto-parallel textured layers defined in the wide
//! camera's pixel coordinates, so both cameras can ray-cast them exactly.
//! Defocus is rendered with a layered renderer: the visible depth range is cut
//! into slabs (uniform in diopters), each slab's premultiplied colour and
//! coverage are blurred with an anti-aliased disc and the slabs are composited
//! back to front.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{estimate_occlusion, WarpField};
use crate::error::{check_dims, Error, Result};
use crate::image::{reflect_index, Image};
use crate::optics::{self, CameraIntrinsics, DefocusMap, DepthMap, LensState};

/// Texture families used for scene layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Checker,
    Noise,
    Stripes,
    /// Random per-layer mix of the high-frequency kinds over a gradient.
    Mixed,
    /// Low-frequency gradients only; bilinear resampling is near-exact.
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub n_layers: usize,
    pub texture: TextureKind,
    /// Inclusive depth range of the layers, in millimetres.
    pub depth_range_mm: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 192,
            height: 192,
            n_layers: 4,
            texture: TextureKind::Mixed,
            depth_range_mm: (400.0, 4000.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Footprint {
    /// Covers the whole plane.
    Full,
    Rect { cx: f64, cy: f64, half_w: f64, half_h: f64, angle: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
}

impl Footprint {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Footprint::Full => true,
            Footprint::Rect { cx, cy, half_w, half_h, angle } => {
                let (u, v) = rotate(x - cx, y - cy, -angle);
                u.abs() <= half_w && v.abs() <= half_h
            }
            Footprint::Ellipse { cx, cy, rx, ry, angle } => {
                let (u, v) = rotate(x - cx, y - cy, -angle);
                (u / rx) * (u / rx) + (v / ry) * (v / ry) <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    Checker { period: f64 },
    Stripes { period: f64 },
    Noise { scale: f64, octaves: u32, seed: u32 },
    Dots { period: f64, radius: f64 },
    Waves { period: f64 },
}

/// A colour field: a linear gradient between two colours overlaid with a
/// pattern that mixes in a third colour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f32; 3],
    pub base_end: [f32; 3],
    pub accent: [f32; 3],
    /// Gradient direction (radians) and length in pixels.
    pub gradient_angle: f64,
    pub gradient_len: f64,
    pub pattern: Pattern,
    pub pattern_angle: f64,
    pub contrast: f32,
}

impl Texture {
    fn eval(&self, x: f64, y: f64) -> [f32; 3] {
        let (gu, _) = rotate(x, y, -self.gradient_angle);
        let g = (0.5 + 0.5 * (gu / self.gradient_len).sin()) as f32;
        let (u, v) = rotate(x, y, -self.pattern_angle);
        let p = match self.pattern {
            Pattern::Checker { period } => {
                let a = (u / period).floor() as i64 + (v / period).floor() as i64;
                if a.rem_euclid(2) == 0 { 1.0 } else { 0.0 }
            }
            Pattern::Stripes { period } => {
                if (u / period).floor() as i64 % 2 == 0 { 1.0 } else { 0.0 }
            }
            Pattern::Noise { scale, octaves, seed } => {
                let mut amp = 0.5;
                let mut freq = 1.0 / scale;
                let mut acc = 0.0;
                let mut norm = 0.0;
                for o in 0..octaves {
                    acc += amp * value_noise(u * freq, v * freq, seed.wrapping_add(o * 7919));
                    norm += amp;
                    amp *= 0.5;
                    freq *= 2.0;
                }
                acc / norm
            }
            Pattern::Dots { period, radius } => {
                let fu = u / period - (u / period).floor() - 0.5;
                let fv = v / period - (v / period).floor() - 0.5;
                if (fu * fu + fv * fv).sqrt() * period <= radius { 1.0 } else { 0.0 }
            }
            Pattern::Waves { period } => 0.5 + 0.5 * (core::f64::consts::TAU * u / period).sin(),
        } as f32;
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let b = self.base[c] + (self.base_end[c] - self.base[c]) * g;
            let v = b + (self.accent[c] - b) * p * self.contrast;
            out[c] = v.clamp(0.0, 1.0);
        }
        out
    }
}

/// One fronto-parallel layer at constant depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub depth_mm: f64,
    pub footprint: Footprint,
    pub texture: Texture,
}

/// Analytic scene: layers sorted from farthest (the full-frame background)
/// to nearest, in wide-camera pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub layers: Vec<Layer>,
}

impl SceneDescriptor {
    /// Nearest layer hit at wide-plane coordinates that depend on the layer
    /// depth through `to_plane`.
    fn cast(&self, to_plane: impl Fn(f64) -> (f64, f64)) -> ([f32; 3], f64) {
        for layer in self.layers.iter().rev() {
            let (x, y) = to_plane(layer.depth_mm);
            if layer.footprint.contains(x, y) {
                return (layer.texture.eval(x, y), layer.depth_mm);
            }
        }
        let bg = &self.layers[0];
        let (x, y) = to_plane(bg.depth_mm);
        (bg.texture.eval(x, y), bg.depth_mm)
    }
}

/// All-in-focus image and exact depth of a scene, seen from the wide camera.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRGBD {
    pub aif_image: Image,
    pub depth: DepthMap,
    pub seed: u64,
    pub descriptor: SceneDescriptor,
}

fn rotate(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x - s * y, s * x + c * y)
}

fn hash2(ix: i64, iy: i64, seed: u32) -> f64 {
    let mut h = (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (seed as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u32) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let a = hash2(ix, iy, seed);
    let b = hash2(ix + 1, iy, seed);
    let c = hash2(ix, iy + 1, seed);
    let d = hash2(ix + 1, iy + 1, seed);
    (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn random_texture(rng: &mut ChaCha8Rng, kind: TextureKind) -> Texture {
    let kind = match kind {
        TextureKind::Mixed => match rng.random_range(0..4) {
            0 => TextureKind::Checker,
            1 => TextureKind::Noise,
            2 => TextureKind::Stripes,
            _ => TextureKind::Mixed,
        },
        k => k,
    };
    let pattern = match kind {
        TextureKind::Checker => Pattern::Checker { period: rng.random_range(2.5..9.0) },
        TextureKind::Stripes => Pattern::Stripes { period: rng.random_range(2.0..7.0) },
        TextureKind::Noise => Pattern::Noise {
            scale: rng.random_range(2.0..6.0),
            octaves: 3,
            seed: rng.random(),
        },
        TextureKind::Mixed => Pattern::Dots {
            period: rng.random_range(5.0..12.0),
            radius: rng.random_range(1.2..3.0),
        },
        TextureKind::Smooth => Pattern::Waves { period: rng.random_range(40.0..90.0) },
    };
    let smooth = kind == TextureKind::Smooth;
    Texture {
        base: random_color(rng),
        base_end: random_color(rng),
        accent: random_color(rng),
        gradient_angle: rng.random_range(0.0..core::f64::consts::TAU),
        gradient_len: rng.random_range(if smooth { 60.0..120.0 } else { 25.0..80.0 }),
        pattern,
        pattern_angle: rng.random_range(0.0..core::f64::consts::PI),
        contrast: rng.random_range(if smooth { 0.2..0.4 } else { 0.55..0.9 }),
    }
}

/// Generates a deterministic scene for `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig, w_cam: &CameraIntrinsics) -> Result<SceneRGBD> {
    let (near, far) = cfg.depth_range_mm;
    if cfg.n_layers == 0 {
        return Err(Error::InvalidConfig("scene needs at least one layer".into()));
    }
    if !(near > w_cam.focal_length_mm && far > near && far.is_finite()) {
        return Err(Error::InvalidConfig(format!("invalid depth range [{near}, {far}]")));
    }
    if (cfg.width, cfg.height) != w_cam.dims() {
        return Err(Error::DimensionMismatch {
            expected: w_cam.dims(),
            found: (cfg.width, cfg.height),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_layers;
    // One layer per equal diopter bin, sampled in the middle of the bin, so
    // layer depths are well separated. Bin 0 is the farthest.
    let (d_far, d_near) = (1.0 / far, 1.0 / near);
    let depths: Vec<f64> = (0..n)
        .map(|k| {
            let lo = d_far + (d_near - d_far) * k as f64 / n as f64;
            let hi = d_far + (d_near - d_far) * (k + 1) as f64 / n as f64;
            let t = rng.random_range(0.2..0.8);
            1.0 / (lo + (hi - lo) * t)
        })
        .collect();

    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let min_dim = w.min(h);
    let background = Layer {
        depth_mm: depths[0],
        footprint: Footprint::Full,
        texture: random_texture(&mut rng, cfg.texture),
    };
    let mut layers = vec![background];
    for &depth_mm in &depths[1..] {
        let texture = random_texture(&mut rng, cfg.texture);
        // Retry placement until the new layer does not swallow an older one.
        let mut footprint = Footprint::Full;
        for _ in 0..32 {
            let cx = rng.random_range(0.2 * w..0.8 * w);
            let cy = rng.random_range(0.2 * h..0.8 * h);
            let angle = rng.random_range(0.0..core::f64::consts::PI);
            let a = rng.random_range(0.12 * min_dim..0.3 * min_dim);
            let b = rng.random_range(0.12 * min_dim..0.3 * min_dim);
            footprint = if rng.random_bool(0.5) {
                Footprint::Rect { cx, cy, half_w: a, half_h: b, angle }
            } else {
                Footprint::Ellipse { cx, cy, rx: a, ry: b, angle }
            };
            let mut trial = layers.clone();
            trial.push(Layer { depth_mm, footprint, texture });
            if min_visible_fraction(&SceneDescriptor { layers: trial }, cfg.width, cfg.height) > 0.04 {
                break;
            }
        }
        layers.push(Layer { depth_mm, footprint, texture });
    }
    let descriptor = SceneDescriptor { layers };
    let (aif_image, depth) = render_view(&descriptor, w_cam, w_cam, 0.0);
    Ok(SceneRGBD {
        aif_image,
        depth,
        seed,
        descriptor,
    })
}

fn min_visible_fraction(desc: &SceneDescriptor, w: usize, h: usize) -> f64 {
    let mut counts = vec![0usize; desc.layers.len()];
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            let (fx, fy) = (x as f64, y as f64);
            let idx = desc
                .layers
                .iter()
                .rposition(|l| l.footprint.contains(fx, fy))
                .unwrap_or(0);
            counts[idx] += 1;
        }
    }
    let total = (w.div_ceil(2) * h.div_ceil(2)) as f64;
    counts.iter().map(|&c| c as f64 / total).fold(1.0, f64::min)
}

/// Ray-casts the scene from a camera displaced by `baseline_mm` along +x
/// from the wide camera. Returns the all-in-focus view and its depth.
pub fn render_view(
    desc: &SceneDescriptor,
    w_cam: &CameraIntrinsics,
    view_cam: &CameraIntrinsics,
    baseline_mm: f64,
) -> (Image, DepthMap) {
    let (vw, vh) = view_cam.dims();
    let mut img = Image::new(vw, vh, 3);
    let mut depth = Image::new(vw, vh, 1);
    for y in 0..vh {
        for x in 0..vw {
            let (rgb, z) = desc.cast(|z| view_to_wide_plane(w_cam, view_cam, baseline_mm, x as f64, y as f64, z));
            for c in 0..3 {
                img.set(c, x, y, rgb[c]);
            }
            depth.set(0, x, y, z as f32);
        }
    }
    (img, DepthMap(depth))
}

/// Wide-camera pixel coordinates of the point at depth `z` seen at view
/// pixel `(u, v)`.
#[inline]
fn view_to_wide_plane(
    w_cam: &CameraIntrinsics,
    view_cam: &CameraIntrinsics,
    baseline_mm: f64,
    u: f64,
    v: f64,
    z: f64,
) -> (f64, f64) {
    let (f, fv) = (w_cam.focal_px(), view_cam.focal_px());
    let (cx, cy) = w_cam.principal_point_px;
    let (cxv, cyv) = view_cam.principal_point_px;
    (cx + (u - cxv) * f / fv + baseline_mm * f / z, cy + (v - cyv) * f / fv)
}

#[inline]
fn wide_to_view(
    w_cam: &CameraIntrinsics,
    view_cam: &CameraIntrinsics,
    baseline_mm: f64,
    u: f64,
    v: f64,
    z: f64,
) -> (f64, f64) {
    let (f, fv) = (w_cam.focal_px(), view_cam.focal_px());
    let (cx, cy) = w_cam.principal_point_px;
    let (cxv, cyv) = view_cam.principal_point_px;
    (cxv + (u - cx) * fv / f - baseline_mm * fv / z, cyv + (v - cy) * fv / f)
}

/// Layered renderer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Number of depth slabs, uniform in diopters over the visible range.
    pub n_slabs: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { n_slabs: 16 }
    }
}

/// Anti-aliased disc kernel: tap weight is the approximate coverage
/// `clamp(r + 0.5 - dist, 0, 1)`, normalized to unit sum. Returns
/// `(dx, dy, weight)` triples.
pub fn disc_kernel(radius: f64) -> Vec<(i32, i32, f64)> {
    let r = radius.max(0.0);
    let support = (r + 0.5).ceil() as i32;
    let mut taps = Vec::new();
    let mut total = 0.0;
    for dy in -support..=support {
        for dx in -support..=support {
            let d = ((dx * dx + dy * dy) as f64).sqrt();
            let w = (r + 0.5 - d).clamp(0.0, 1.0);
            if w > 0.0 {
                taps.push((dx, dy, w));
                total += w;
            }
        }
    }
    for t in &mut taps {
        t.2 /= total;
    }
    taps
}

/// Renders the defocused wide view of `scene` with the given optics.
pub fn render_defocused(
    scene: &SceneRGBD,
    cam: &CameraIntrinsics,
    lens: &LensState,
) -> Result<(Image, DefocusMap)> {
    render_rgbd(&scene.aif_image, &scene.depth, cam, lens, &RenderConfig::default())
}

/// Layered defocus rendering of an all-in-focus image with known depth.
pub fn render_rgbd(
    aif: &Image,
    depth: &DepthMap,
    cam: &CameraIntrinsics,
    lens: &LensState,
    cfg: &RenderConfig,
) -> Result<(Image, DefocusMap)> {
    check_dims(cam.dims(), aif.dims())?;
    let defocus = optics::defocus_map(cam, lens, depth)?;
    if defocus.max_radius() == 0.0 {
        return Ok((aif.clone(), defocus));
    }
    let (w, h) = aif.dims();
    let n = w * h;
    let nc = aif.channels();
    let n_slabs = cfg.n_slabs.max(1);

    // Slab index per pixel; `n_slabs` collects missing depths, drawn last
    // and sharp.
    let (dmin, dmax) = depth.range().unwrap_or((1.0, 1.0));
    let (inv_far, inv_near) = (1.0 / dmax as f64, 1.0 / dmin as f64);
    let span = inv_near - inv_far;
    let slab_of: Vec<usize> = depth
        .data()
        .iter()
        .map(|&d| {
            if !DepthMap::is_valid_depth(d) {
                n_slabs
            } else if span <= 0.0 {
                0
            } else {
                let t = (1.0 / d as f64 - inv_far) / span;
                ((t * n_slabs as f64) as usize).min(n_slabs - 1)
            }
        })
        .collect();

    let mut acc = vec![0.0f64; n * nc];
    let mut acc_a = vec![0.0f64; n];
    let mut layer = vec![0.0f64; n * nc];
    let mut layer_a = vec![0.0f64; n];
    for slab in 0..=n_slabs {
        let members: Vec<usize> = (0..n).filter(|&i| slab_of[i] == slab).collect();
        if members.is_empty() {
            continue;
        }
        let radius = if slab == n_slabs {
            0.0
        } else {
            members.iter().map(|&i| defocus.data()[i] as f64).sum::<f64>() / members.len() as f64
        };
        layer.iter_mut().for_each(|v| *v = 0.0);
        layer_a.iter_mut().for_each(|v| *v = 0.0);
        let taps = disc_kernel(radius);
        // Scatter with reflected targets equals the reflected-boundary gather
        // for kernels symmetric in x and y.
        for &i in &members {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for &(dx, dy, k) in &taps {
                let tx = reflect_index(x + dx as isize, w);
                let ty = reflect_index(y + dy as isize, h);
                let t = ty * w + tx;
                layer_a[t] += k;
                for c in 0..nc {
                    layer[c * n + t] += k * aif.data()[c * n + i] as f64;
                }
            }
        }
        for t in 0..n {
            let a = layer_a[t];
            for c in 0..nc {
                acc[c * n + t] = layer[c * n + t] + (1.0 - a) * acc[c * n + t];
            }
            acc_a[t] = a + (1.0 - a) * acc_a[t];
        }
    }
    let mut out = Image::new(w, h, nc);
    for t in 0..n {
        let a = acc_a[t];
        for c in 0..nc {
            let v = if a > 1e-12 { acc[c * n + t] / a } else { aif.data()[c * n + t] as f64 };
            out.data_mut()[c * n + t] = v as f32;
        }
    }
    Ok((out, defocus))
}

/// Affine colour mismatch applied to the ultra-wide frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorTransform {
    pub matrix: [[f32; 3]; 3],
    pub offset: [f32; 3],
}

impl ColorTransform {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            offset: [0.0; 3],
        }
    }

    /// A mild white-balance shift: red and blue gains move in opposite
    /// directions by up to `jitter`, with a little channel cross-talk.
    pub fn white_balance(jitter: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0105);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let g_r = 1.0 + sign * jitter * rng.random_range(0.5f32..1.0);
        let g_b = 1.0 - sign * jitter * rng.random_range(0.5f32..1.0);
        let x = 0.1 * jitter;
        Self {
            matrix: [[g_r, x, 0.0], [0.0, 1.0, 0.0], [0.0, x, g_b]],
            offset: [0.0, 0.25 * jitter * rng.random_range(-1.0f32..1.0), 0.0],
        }
    }

    pub fn determinant(&self) -> f32 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn apply(&self, img: &Image) -> Image {
        let (w, h) = img.dims();
        let n = w * h;
        let mut out = Image::new(w, h, 3);
        let d = img.data();
        for i in 0..n {
            let rgb = [d[i], d[n + i], d[2 * n + i]];
            for c in 0..3 {
                let m = &self.matrix[c];
                let v = m[0] * rgb[0] + m[1] * rgb[1] + m[2] * rgb[2] + self.offset[c];
                out.data_mut()[c * n + i] = v.clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Wide + ultra-wide camera pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub w_cam: CameraIntrinsics,
    pub uw_cam: CameraIntrinsics,
    /// Fixed focus of the ultra-wide lens.
    pub uw_lens: LensState,
    /// Ultra-wide camera centre offset along +x, in millimetres.
    pub baseline_mm: f64,
    pub color_transform: ColorTransform,
    /// Focus sweep limits for the wide camera.
    pub near_mm: f64,
    pub far_mm: f64,
}

impl CameraRig {
    /// Default rig for `width x height` wide frames. The ultra-wide camera
    /// has 0.8x the wide focal length in pixels, a 1.3x larger frame, a much
    /// smaller aperture and a fixed focus at 1.2 m.
    pub fn default_for(width: usize, height: usize) -> Self {
        let w_cam = CameraIntrinsics::centered(6.8, 3.6, 0.008, width, height);
        let uw_w = (width as f64 * 1.3).round() as usize;
        let uw_h = (height as f64 * 1.3).round() as usize;
        let uw_focal = 2.2;
        let uw_pitch = uw_focal / (0.8 * w_cam.focal_px());
        let uw_cam = CameraIntrinsics::centered(uw_focal, 0.9, uw_pitch, uw_w, uw_h);
        Self {
            w_cam,
            uw_cam,
            uw_lens: LensState::new(1200.0),
            baseline_mm: 10.0,
            color_transform: ColorTransform::white_balance(0.05, 0),
            near_mm: 450.0,
            far_mm: 3500.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.w_cam.validate()?;
        self.uw_cam.validate()?;
        self.uw_lens.validate_for(&self.uw_cam)?;
        if !(self.baseline_mm >= 0.0 && self.baseline_mm.is_finite()) {
            return Err(Error::Domain(format!("degenerate baseline {}", self.baseline_mm)));
        }
        if self.color_transform.determinant().abs() < 1e-6 {
            return Err(Error::InvalidConfig("colour transform is not invertible".into()));
        }
        Ok(())
    }
}

/// Everything the ultra-wide camera contributes to a focus stack. It has a
/// fixed focus, so one instance is shared by all slices.
#[derive(Debug, Clone, PartialEq)]
pub struct UwCapture {
    /// Native ultra-wide frame (ultra-wide dimensions).
    pub frame: Image,
    /// Wide grid -> ultra-wide frame.
    pub true_warp: WarpField,
    /// Ultra-wide grid -> wide frame.
    pub true_warp_bwd: WarpField,
    /// Ground-truth occlusion on the wide grid (1 = not visible from UW).
    pub occlusion_mask: Image,
    /// Ultra-wide CoC radii (ultra-wide pixels) at every wide pixel.
    pub defocus_uw: DefocusMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualCapture {
    pub w_slice: Image,
    pub lens_w: LensState,
    pub defocus_w: DefocusMap,
    pub uw: Arc<UwCapture>,
}

impl DualCapture {
    pub fn uw_frame(&self) -> &Image {
        &self.uw.frame
    }

    pub fn true_warp(&self) -> &WarpField {
        &self.uw.true_warp
    }

    pub fn occlusion_mask(&self) -> &Image {
        &self.uw.occlusion_mask
    }
}

/// Renders the ultra-wide side of a capture.
pub fn render_uw(scene: &SceneRGBD, rig: &CameraRig) -> Result<UwCapture> {
    rig.validate()?;
    check_dims(rig.w_cam.dims(), scene.aif_image.dims())?;
    let (uw_aif, uw_depth) = render_view(&scene.descriptor, &rig.w_cam, &rig.uw_cam, rig.baseline_mm);
    let (uw_blur, _) = render_rgbd(&uw_aif, &uw_depth, &rig.uw_cam, &rig.uw_lens, &RenderConfig::default())?;
    let frame = rig.color_transform.apply(&uw_blur);

    let (w, h) = rig.w_cam.dims();
    let (uw_w, uw_h) = rig.uw_cam.dims();
    let mut fwd = WarpField::zeros(w, h);
    let mut occ = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let z = scene.depth.data()[i] as f64;
            let (u, v) = wide_to_view(&rig.w_cam, &rig.uw_cam, rig.baseline_mm, x as f64, y as f64, z);
            fwd.dx[i] = (u - x as f64) as f32;
            fwd.dy[i] = (v - y as f64) as f32;
            let inside = u >= 0.0 && v >= 0.0 && u <= (uw_w - 1) as f64 && v <= (uw_h - 1) as f64;
            let visible = inside && {
                let (_, hit) = scene
                    .descriptor
                    .cast(|zz| view_to_wide_plane(&rig.w_cam, &rig.uw_cam, rig.baseline_mm, u, v, zz));
                hit >= z * (1.0 - 1e-6)
            };
            if !inside {
                fwd.validity[i] = 0.0;
            }
            if !visible {
                occ.data_mut()[i] = 1.0;
            }
        }
    }
    let mut bwd = WarpField::zeros(uw_w, uw_h);
    for y in 0..uw_h {
        for x in 0..uw_w {
            let i = y * uw_w + x;
            let z = uw_depth.data()[i] as f64;
            let (u, v) = view_to_wide_plane(&rig.w_cam, &rig.uw_cam, rig.baseline_mm, x as f64, y as f64, z);
            bwd.dx[i] = (u - x as f64) as f32;
            bwd.dy[i] = (v - y as f64) as f32;
        }
    }
    bwd.invalidate_outside(w, h);
    let defocus_uw = {
        let mut cam = rig.uw_cam;
        cam.width_px = w;
        cam.height_px = h;
        cam.principal_point_px = rig.w_cam.principal_point_px;
        optics::defocus_map(&cam, &rig.uw_lens, &scene.depth)?
    };
    Ok(UwCapture {
        frame,
        true_warp: fwd,
        true_warp_bwd: bwd,
        occlusion_mask: occ,
        defocus_uw,
    })
}

/// Renders one wide focus slice together with the ultra-wide frame.
pub fn render_dual_capture(scene: &SceneRGBD, rig: &CameraRig, lens_w: &LensState) -> Result<DualCapture> {
    let uw = Arc::new(render_uw(scene, rig)?);
    let (w_slice, defocus_w) = render_defocused(scene, &rig.w_cam, lens_w)?;
    Ok(DualCapture {
        w_slice,
        lens_w: *lens_w,
        defocus_w,
        uw,
    })
}

/// Focus-stack slices sharing one scene and one ultra-wide capture.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusStack {
    pub slices: Vec<DualCapture>,
    pub rig: CameraRig,
    pub scene: SceneRGBD,
}

impl FocusStack {
    pub fn focus_distances(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.lens_w.focus_distance_mm).collect()
    }

    pub fn aif_image(&self) -> &Image {
        &self.scene.aif_image
    }

    pub fn uw(&self) -> &Arc<UwCapture> {
        &self.slices[0].uw
    }

    /// Occlusion estimated by forward-backward consistency of the oracle
    /// warps, the mask fed to the network by default.
    pub fn estimated_occlusion(&self, threshold_px: f32) -> Image {
        let uw = self.uw();
        estimate_occlusion(&uw.true_warp, &uw.true_warp_bwd, threshold_px)
    }
}

/// Sweeps the wide focus over `n_slices` diopter-uniform distances between
/// the rig's near and far limits.
pub fn generate_stack(scene: &SceneRGBD, rig: &CameraRig, n_slices: usize) -> Result<FocusStack> {
    let lenses = optics::focus_sweep(&rig.w_cam, rig.near_mm, rig.far_mm, n_slices)?;
    generate_stack_at(scene, rig, &lenses)
}

/// Focus stack at explicit focus distances (sorted ascending).
pub fn generate_stack_at(scene: &SceneRGBD, rig: &CameraRig, lenses: &[LensState]) -> Result<FocusStack> {
    if lenses.len() < 2 {
        return Err(Error::Domain(format!("a focus stack needs at least 2 slices, got {}", lenses.len())));
    }
    let mut lenses = lenses.to_vec();
    lenses.sort_by(|a, b| a.focus_distance_mm.partial_cmp(&b.focus_distance_mm).unwrap());
    let uw = Arc::new(render_uw(scene, rig)?);
    let mut slices = Vec::with_capacity(lenses.len());
    for lens in &lenses {
        let (w_slice, defocus_w) = render_defocused(scene, &rig.w_cam, lens)?;
        slices.push(DualCapture {
            w_slice,
            lens_w: *lens,
            defocus_w,
            uw: uw.clone(),
        });
    }
    Ok(FocusStack {
        slices,
        rig: *rig,
        scene: scene.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Side of the square window accumulating Laplacian energy.
    pub window: usize,
    /// Sharpness exponent of the soft selection weights.
    pub power: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self { window: 7, power: 4.0 }
    }
}

/// Sharpness-weighted focus-stack merge.
pub fn focus_stack_merge(slices: &[&Image], cfg: &MergeConfig) -> Result<Image> {
    let first = *slices.first().ok_or(Error::Empty("focus stack has no slices"))?;
    for s in slices {
        check_dims(first.dims(), s.dims())?;
    }
    let (w, h) = first.dims();
    let n = w * h;
    let energies: Vec<Vec<f64>> = slices.iter().map(|s| local_laplacian_energy(s, cfg.window)).collect();
    let mut out = Image::new(w, h, first.channels());
    for i in 0..n {
        let emax = energies.iter().map(|e| e[i]).fold(0.0, f64::max);
        let mut weights: Vec<f64> = if emax <= 0.0 {
            vec![1.0; slices.len()]
        } else {
            energies.iter().map(|e| (e[i] / emax).powf(cfg.power)).collect()
        };
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|v| *v /= total);
        for c in 0..first.channels() {
            let mut v = 0.0f64;
            for (s, wk) in slices.iter().zip(&weights) {
                v += wk * s.data()[c * n + i] as f64;
            }
            out.data_mut()[c * n + i] = v as f32;
        }
    }
    Ok(out)
}

fn local_laplacian_energy(img: &Image, window: usize) -> Vec<f64> {
    let lum = img.luminance();
    let (w, h) = lum.dims();
    let p = lum.plane(0);
    let at = |x: isize, y: isize| p[reflect_index(y, h) * w + reflect_index(x, w)] as f64;
    let mut lap2 = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let l = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
            lap2[y as usize * w + x as usize] = l * l;
        }
    }
    let r = (window / 2) as isize;
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w as isize {
            tmp[y * w + x as usize] = (-r..=r).map(|d| lap2[y * w + reflect_index(x + d, w)]).sum();
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w {
            out[y as usize * w + x] = (-r..=r).map(|d| tmp[reflect_index(y + d, h) * w + x]).sum();
        }
    }
    out
}
