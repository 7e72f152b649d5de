//! Ultra-wide to wide alignment.
//!
//! A [`WarpField`] is a backward map defined on the target (wide) grid: the
//! target pixel `p` takes its value from the source image at `p + d(p)`.
//! Oracle fields come from the scene generator; [`estimate_warp`] recovers a
//! field by coarse-to-fine block matching.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{check_dims, Error, Result};
use crate::image::Image;
use crate::optics::CameraIntrinsics;

/// Per-pixel displacement in pixels plus a validity weight in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    width: usize,
    height: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
    /// 0 marks displacements that are unusable (left the source frame or had
    /// no matching signal).
    pub validity: Vec<f32>,
}

impl WarpField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            dx: vec![dx; n],
            dy: vec![dy; n],
            validity: vec![1.0; n],
        }
    }

    pub fn from_parts(
        width: usize,
        height: usize,
        dx: Vec<f32>,
        dy: Vec<f32>,
        validity: Vec<f32>,
    ) -> Result<Self> {
        let n = width * height;
        if dx.len() != n || dy.len() != n || validity.len() != n {
            return Err(Error::InvalidConfig(format!(
                "warp components do not match {width}x{height}"
            )));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("warp displacement".into()));
        }
        Ok(Self {
            width,
            height,
            dx,
            dy,
            validity,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    /// Marks displacements whose source position falls outside a
    /// `src_w x src_h` frame as invalid.
    pub fn invalidate_outside(&mut self, src_w: usize, src_h: usize) {
        for y in 0..self.height {
            for x in 0..self.width {
                let i = y * self.width + x;
                let sx = x as f32 + self.dx[i];
                let sy = y as f32 + self.dy[i];
                if !(sx >= 0.0 && sy >= 0.0 && sx <= (src_w - 1) as f32 && sy <= (src_h - 1) as f32)
                {
                    self.validity[i] = 0.0;
                }
            }
        }
    }

    /// Bilinear sample of the displacement at a continuous position, `None`
    /// outside the field.
    fn sample(&self, x: f32, y: f32) -> Option<(f32, f32, f32)> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f32 && y <= (self.height - 1) as f32) {
            return None;
        }
        let x0 = x as usize;
        let y0 = y as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let w = self.width;
        let lerp = |v: &[f32]| {
            let top = v[y0 * w + x0] * (1.0 - fx) + v[y0 * w + x1] * fx;
            let bot = v[y1 * w + x0] * (1.0 - fx) + v[y1 * w + x1] * fx;
            top * (1.0 - fy) + bot * fy
        };
        let nearest = {
            let xn = if fx < 0.5 { x0 } else { x1 };
            let yn = if fy < 0.5 { y0 } else { y1 };
            self.validity[yn * w + xn]
        };
        Some((lerp(&self.dx), lerp(&self.dy), nearest))
    }
}

/// Output of [`warp`]: the resampled image and a per-pixel validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Warped {
    pub image: Image,
    pub valid: Vec<bool>,
}

/// Bilinear backward warp of `image` onto the grid of `field`. Pixels whose
/// source lies outside `image` (or whose displacement is invalid) are 0.
pub fn warp(image: &Image, field: &WarpField) -> Warped {
    let (w, h) = field.dims();
    let mut out = Image::new(w, h, image.channels());
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if field.validity[i] <= 0.0 {
                continue;
            }
            let sx = x as f32 + field.dx[i];
            let sy = y as f32 + field.dy[i];
            let mut ok = true;
            for c in 0..image.channels() {
                match image.sample_bilinear(c, sx, sy) {
                    Some(v) => out.set(c, x, y, v),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                valid[i] = true;
            } else {
                for c in 0..image.channels() {
                    out.set(c, x, y, 0.0);
                }
            }
        }
    }
    Warped { image: out, valid }
}

/// Coarse-to-fine block matching parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockMatchConfig {
    pub levels: usize,
    /// Block edge in pixels at every pyramid level.
    pub block: usize,
    /// Integer search radius per level.
    pub search: i32,
    /// Minimum luminance variance for a block to count as textured.
    pub min_variance: f32,
}

impl Default for BlockMatchConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            block: 16,
            search: 4,
            min_variance: 1e-5,
        }
    }
}

impl BlockMatchConfig {
    /// Largest displacement reachable through the pyramid.
    pub fn total_search_range(&self) -> i32 {
        self.search * ((1 << self.levels.max(1)) - 1)
    }
}

/// Estimates the backward field that maps `target` pixels into `source`
/// (`target(p) ~ source(p + d)`). Both images must share dimensions.
pub fn estimate_warp(source: &Image, target: &Image, cfg: &BlockMatchConfig) -> Result<WarpField> {
    check_dims(target.dims(), source.dims())?;
    if cfg.levels == 0 || cfg.block < 2 || cfg.search < 0 {
        return Err(Error::InvalidConfig(format!("bad block matching config {cfg:?}")));
    }
    let src_l = source.luminance();
    let tgt_l = target.luminance();
    let mut src_pyr = vec![src_l];
    let mut tgt_pyr = vec![tgt_l];
    for _ in 1..cfg.levels {
        let s = src_pyr.last().unwrap();
        if s.width() < 2 * cfg.block.min(8) || s.height() < 2 * cfg.block.min(8) {
            break;
        }
        let s = s.downsample2();
        let t = tgt_pyr.last().unwrap().downsample2();
        src_pyr.push(s);
        tgt_pyr.push(t);
    }

    let mut flow: Option<(WarpField, Vec<f32>)> = None;
    for level in (0..src_pyr.len()).rev() {
        let src = &src_pyr[level];
        let tgt = &tgt_pyr[level];
        let (w, h) = tgt.dims();
        let init = match &flow {
            None => WarpField::zeros(w, h),
            Some((prev, _)) => upsample_flow(prev, w, h),
        };
        let finest = level == 0;
        let (field, conf) = match_level(src, tgt, &init, cfg, finest);
        flow = Some((field, conf));
    }
    let (mut field, conf) = flow.expect("at least one level");
    for (v, c) in field.validity.iter_mut().zip(&conf) {
        *v = *c;
    }
    field.invalidate_outside(source.width(), source.height());
    Ok(field)
}

fn upsample_flow(prev: &WarpField, w: usize, h: usize) -> WarpField {
    let mut out = WarpField::zeros(w, h);
    let (pw, ph) = prev.dims();
    for y in 0..h {
        for x in 0..w {
            let px = ((x as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, (pw - 1) as f32);
            let py = ((y as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, (ph - 1) as f32);
            let (dx, dy, _) = prev.sample(px, py).unwrap_or((0.0, 0.0, 0.0));
            let i = y * w + x;
            out.dx[i] = 2.0 * dx;
            out.dy[i] = 2.0 * dy;
        }
    }
    out
}

struct BlockResult {
    dx: f32,
    dy: f32,
    confident: bool,
}

fn match_level(
    src: &Image,
    tgt: &Image,
    init: &WarpField,
    cfg: &BlockMatchConfig,
    subpixel: bool,
) -> (WarpField, Vec<f32>) {
    let (w, h) = tgt.dims();
    let block = cfg.block.min(w).min(h).max(2);
    let stride = (block / 2).max(1);
    let gx = w.div_ceil(stride);
    let gy = h.div_ceil(stride);
    let centers_x: Vec<f32> = (0..gx).map(|i| (i * stride) as f32 + (stride as f32 - 1.0) / 2.0).collect();
    let centers_y: Vec<f32> = (0..gy).map(|i| (i * stride) as f32 + (stride as f32 - 1.0) / 2.0).collect();

    let mut results = Vec::with_capacity(gx * gy);
    for by in 0..gy {
        for bx in 0..gx {
            let cx = centers_x[bx];
            let cy = centers_y[by];
            let x0 = ((cx - block as f32 / 2.0).round().max(0.0) as usize).min(w.saturating_sub(block));
            let y0 = ((cy - block as f32 / 2.0).round().max(0.0) as usize).min(h.saturating_sub(block));
            let (ix, iy) = init.at(cx.round().min((w - 1) as f32) as usize, cy.round().min((h - 1) as f32) as usize);
            results.push(match_block(src, tgt, x0, y0, block, ix.round() as i32, iy.round() as i32, cfg, subpixel));
        }
    }

    // 3x3 median over the block grid suppresses isolated mismatches.
    let median_of = |sel: &dyn Fn(&BlockResult) -> f32, bx: usize, by: usize| -> f32 {
        let mut vals: Vec<f32> = Vec::with_capacity(9);
        for ny in by.saturating_sub(1)..(by + 2).min(gy) {
            for nx in bx.saturating_sub(1)..(bx + 2).min(gx) {
                let r = &results[ny * gx + nx];
                if r.confident {
                    vals.push(sel(r));
                }
            }
        }
        if vals.is_empty() {
            return sel(&results[by * gx + bx]);
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals[vals.len() / 2]
    };
    let mut grid_dx = vec![0.0f32; gx * gy];
    let mut grid_dy = vec![0.0f32; gx * gy];
    let mut grid_conf = vec![0.0f32; gx * gy];
    for by in 0..gy {
        for bx in 0..gx {
            let i = by * gx + bx;
            grid_dx[i] = median_of(&|r: &BlockResult| r.dx, bx, by);
            grid_dy[i] = median_of(&|r: &BlockResult| r.dy, bx, by);
            grid_conf[i] = if results[i].confident { 1.0 } else { 0.0 };
        }
    }

    let mut field = WarpField::zeros(w, h);
    let mut conf = vec![0.0f32; w * h];
    let interp_axis = |centers: &[f32], p: f32| -> (usize, usize, f32) {
        let n = centers.len();
        if n == 1 || p <= centers[0] {
            return (0, 0, 0.0);
        }
        if p >= centers[n - 1] {
            return (n - 1, n - 1, 0.0);
        }
        let i = ((p - centers[0]) / stride as f32) as usize;
        let i = i.min(n - 2);
        let t = (p - centers[i]) / (centers[i + 1] - centers[i]);
        (i, i + 1, t)
    };
    for y in 0..h {
        let (y0, y1, ty) = interp_axis(&centers_y, y as f32);
        for x in 0..w {
            let (x0, x1, tx) = interp_axis(&centers_x, x as f32);
            let bil = |g: &[f32]| {
                let a = g[y0 * gx + x0] * (1.0 - tx) + g[y0 * gx + x1] * tx;
                let b = g[y1 * gx + x0] * (1.0 - tx) + g[y1 * gx + x1] * tx;
                a * (1.0 - ty) + b * ty
            };
            let i = y * w + x;
            field.dx[i] = bil(&grid_dx);
            field.dy[i] = bil(&grid_dy);
            conf[i] = bil(&grid_conf);
        }
    }
    (field, conf)
}

#[allow(clippy::too_many_arguments)]
fn match_block(
    src: &Image,
    tgt: &Image,
    x0: usize,
    y0: usize,
    block: usize,
    ix: i32,
    iy: i32,
    cfg: &BlockMatchConfig,
    subpixel: bool,
) -> BlockResult {
    let (w, h) = tgt.dims();
    let (sw, sh) = (src.width() as i32, src.height() as i32);
    let t = tgt.plane(0);
    let s = src.plane(0);
    let bw = block.min(w - x0);
    let bh = block.min(h - y0);

    let mut mean = 0.0f64;
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            mean += t[y * w + x] as f64;
        }
    }
    let n = (bw * bh) as f64;
    mean /= n;
    let mut var = 0.0f64;
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let d = t[y * w + x] as f64 - mean;
            var += d * d;
        }
    }
    var /= n;
    if var < cfg.min_variance as f64 {
        return BlockResult {
            dx: ix as f32,
            dy: iy as f32,
            confident: false,
        };
    }

    let cost = |ox: i32, oy: i32| -> Option<f64> {
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for y in y0..y0 + bh {
            let syy = y as i32 + oy;
            if syy < 0 || syy >= sh {
                continue;
            }
            for x in x0..x0 + bw {
                let sxx = x as i32 + ox;
                if sxx < 0 || sxx >= sw {
                    continue;
                }
                let d = t[y * w + x] as f64 - s[syy as usize * sw as usize + sxx as usize] as f64;
                acc += d * d;
                count += 1;
            }
        }
        if count * 2 < bw * bh {
            None
        } else {
            Some(acc / count as f64)
        }
    };

    let r = cfg.search;
    let mut best = (ix, iy);
    let mut best_cost = cost(ix, iy).unwrap_or(f64::INFINITY);
    for oy in -r..=r {
        for ox in -r..=r {
            if ox == 0 && oy == 0 {
                continue;
            }
            if let Some(c) = cost(ix + ox, iy + oy) {
                if c < best_cost {
                    best_cost = c;
                    best = (ix + ox, iy + oy);
                }
            }
        }
    }
    if !best_cost.is_finite() {
        return BlockResult {
            dx: ix as f32,
            dy: iy as f32,
            confident: false,
        };
    }
    let (mut fx, mut fy) = (best.0 as f32, best.1 as f32);
    if subpixel && best_cost > 0.0 {
        let refine = |cm: Option<f64>, cp: Option<f64>| -> f32 {
            match (cm, cp) {
                (Some(a), Some(b)) => {
                    let denom = a - 2.0 * best_cost + b;
                    if denom > 1e-12 {
                        ((a - b) / (2.0 * denom)).clamp(-0.5, 0.5) as f32
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            }
        };
        fx += refine(cost(best.0 - 1, best.1), cost(best.0 + 1, best.1));
        fy += refine(cost(best.0, best.1 - 1), cost(best.0, best.1 + 1));
    }
    BlockResult {
        dx: fx,
        dy: fy,
        confident: true,
    }
}

/// Default round-trip tolerance of [`estimate_occlusion`].
pub const DEFAULT_OCCLUSION_THRESHOLD_PX: f32 = 1.5;

/// Forward-backward consistency check. `forward` lives on the target grid
/// and maps into the source; `backward` lives on the source grid and maps
/// back. A target pixel is occluded (1) when no valid source pixel next to
/// its forward position maps back within `threshold_px`, or when its
/// forward displacement is invalid. Checking the four neighbours one by one
/// avoids mixing foreground and background vectors across depth edges.
pub fn estimate_occlusion(forward: &WarpField, backward: &WarpField, threshold_px: f32) -> Image {
    let (w, h) = forward.dims();
    let (bw, bh) = backward.dims();
    let mut mask = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut occluded = true;
            if forward.validity[i] > 0.0 {
                let sx = x as f32 + forward.dx[i];
                let sy = y as f32 + forward.dy[i];
                // Neighbours with non-zero bilinear weight.
                let (xa, xb) = (sx.floor(), sx.ceil());
                let (ya, yb) = (sy.floor(), sy.ceil());
                'search: for (qy, dup_y) in [(ya, false), (yb, yb == ya)] {
                    for (qx, dup_x) in [(xa, false), (xb, xb == xa)] {
                        if dup_x || dup_y || qx < 0.0 || qy < 0.0 || qx >= bw as f32 || qy >= bh as f32 {
                            continue;
                        }
                        let j = qy as usize * bw + qx as usize;
                        if backward.validity[j] <= 0.0 {
                            continue;
                        }
                        let ex = qx + backward.dx[j] - x as f32;
                        let ey = qy + backward.dy[j] - y as f32;
                        // Rounding to a neighbour moves the probe by < 1 px.
                        let slack = (sx - qx).hypot(sy - qy);
                        if ex.hypot(ey) <= threshold_px + slack {
                            occluded = false;
                            break 'search;
                        }
                    }
                }
            }
            if occluded {
                mask.data_mut()[i] = 1.0;
            }
        }
    }
    mask
}

/// Field sending every wide pixel to the ultra-wide pixel that sees the
/// same direction, ignoring parallax (points at infinity).
pub fn intrinsic_field(w_cam: &CameraIntrinsics, uw_cam: &CameraIntrinsics) -> WarpField {
    let (w, h) = w_cam.dims();
    let k = uw_cam.focal_px() / w_cam.focal_px();
    let (cx, cy) = w_cam.principal_point_px;
    let (ux, uy) = uw_cam.principal_point_px;
    let mut f = WarpField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            f.dx[i] = (ux + (x as f64 - cx) * k - x as f64) as f32;
            f.dy[i] = (uy + (y as f64 - cy) * k - y as f64) as f32;
        }
    }
    f.invalidate_outside(uw_cam.width_px, uw_cam.height_px);
    f
}

/// Ultra-wide frame brought onto the wide grid, with its occlusion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedUw {
    pub warped: Image,
    pub occlusion: Image,
}

/// Aligns a raw ultra-wide frame to `wide`: resample by the intrinsics,
/// estimate the remaining parallax both ways by block matching, warp, and
/// flag pixels failing the forward-backward check.
pub fn align_uw_to_wide(
    wide: &Image,
    uw: &Image,
    w_cam: &CameraIntrinsics,
    uw_cam: &CameraIntrinsics,
    cfg: &BlockMatchConfig,
    occlusion_threshold_px: f32,
) -> Result<AlignedUw> {
    check_dims(w_cam.dims(), wide.dims())?;
    check_dims(uw_cam.dims(), uw.dims())?;
    let pre = warp(uw, &intrinsic_field(w_cam, uw_cam)).image;
    let fwd = estimate_warp(&pre, wide, cfg)?;
    let bwd = estimate_warp(wide, &pre, cfg)?;
    Ok(AlignedUw {
        warped: warp(&pre, &fwd).image,
        occlusion: estimate_occlusion(&fwd, &bwd, occlusion_threshold_px),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 3, |c, x, y| {
            let (x, y) = (x as f32, y as f32);
            let v = 0.5
                + 0.25 * ((0.37 * x + 0.11 * y + c as f32).sin())
                + 0.2 * ((0.05 * x * y).sin() * (0.23 * y - 0.4 * x).cos());
            v.clamp(0.0, 1.0)
        })
    }

    #[test]
    fn zero_warp_is_identity() {
        let img = texture(20, 12);
        let out = warp(&img, &WarpField::zeros(20, 12));
        assert_eq!(out.image, img);
        assert!(out.valid.iter().all(|&v| v));
    }

    #[test]
    fn constant_shift_reproduces_translated_image() {
        let base = texture(40, 30);
        // target(x) = base(x + 3)
        let target = Image::from_fn(37, 30, 3, |c, x, y| base.get(c, x + 3, y));
        let out = warp(&base, &WarpField::constant(37, 30, 3.0, 0.0));
        let mut max = 0.0f32;
        for c in 0..3 {
            for y in 2..28 {
                for x in 2..35 {
                    max = max.max((out.image.get(c, x, y) - target.get(c, x, y)).abs());
                }
            }
        }
        assert!(max < 2.0 / 255.0, "max err {max}");
    }

    #[test]
    fn warp_flags_out_of_frame_pixels() {
        let img = texture(10, 10);
        let out = warp(&img, &WarpField::constant(10, 10, 4.0, 0.0));
        assert!(!out.valid[9]);
        assert_eq!(out.image.get(0, 9, 0), 0.0);
        assert!(out.valid[5]);
    }

    #[test]
    fn identical_images_give_zero_flow() {
        let img = texture(64, 48);
        let f = estimate_warp(&img, &img, &BlockMatchConfig::default()).unwrap();
        assert!(f.dx.iter().chain(&f.dy).all(|&d| d == 0.0));
    }

    #[test]
    fn flat_images_have_no_confidence() {
        let img = Image::filled(64, 64, 3, 0.4);
        let f = estimate_warp(&img, &img, &BlockMatchConfig::default()).unwrap();
        assert!(f.dx.iter().chain(&f.dy).all(|&d| d == 0.0));
        assert!(f.validity.iter().all(|&v| v == 0.0));
    }

    /// Multi-scale value noise; unlike `texture` it has no dominant period.
    fn noise_texture(w: usize, h: usize) -> Image {
        let hash = |ix: i64, iy: i64, s: i64| {
            let mut v = (ix.wrapping_mul(73_856_093) ^ iy.wrapping_mul(19_349_663) ^ s.wrapping_mul(83_492_791)) as u64;
            v ^= v >> 13;
            v = v.wrapping_mul(0x5bd1_e995);
            v ^= v >> 15;
            (v % 1000) as f32 / 1000.0
        };
        Image::from_fn(w, h, 3, |c, x, y| {
            let mut acc = 0.0;
            for (k, cell) in [16.0f32, 8.0, 4.0].iter().enumerate() {
                let (fx, fy) = (x as f32 / cell, y as f32 / cell);
                let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
                let (tx, ty) = (fx - ix as f32, fy - iy as f32);
                let s = (k * 3 + c) as i64;
                let a = hash(ix, iy, s) * (1.0 - tx) + hash(ix + 1, iy, s) * tx;
                let b = hash(ix, iy + 1, s) * (1.0 - tx) + hash(ix + 1, iy + 1, s) * tx;
                acc += (a * (1.0 - ty) + b * ty) / 3.0;
            }
            acc
        })
    }

    #[test]
    fn recovers_global_integer_shift() {
        let src = noise_texture(128, 96);
        for &(dx, dy) in &[(5i32, -3i32), (-11, 7), (0, 2)] {
            let tgt = Image::from_fn(128, 96, 3, |c, x, y| {
                src.sample_clamped(c, (x as i32 + dx) as f32, (y as i32 + dy) as f32)
            });
            let f = estimate_warp(&src, &tgt, &BlockMatchConfig::default()).unwrap();
            let mut xs: Vec<f32> = f.dx.clone();
            let mut ys: Vec<f32> = f.dy.clone();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (mx, my) = (xs[xs.len() / 2], ys[ys.len() / 2]);
            assert!((mx - dx as f32).abs() <= 0.5 && (my - dy as f32).abs() <= 0.5, "({mx},{my}) vs ({dx},{dy})");
        }
    }

    #[test]
    fn exact_inverse_has_no_occlusion() {
        let fwd = WarpField::constant(16, 16, 2.0, -1.0);
        let bwd = WarpField::constant(16, 16, -2.0, 1.0);
        let mut fwd_in = fwd.clone();
        fwd_in.invalidate_outside(16, 16);
        let m = estimate_occlusion(&fwd_in, &bwd, 1.5);
        for y in 1..16 {
            for x in 0..14 {
                assert_eq!(m.get(0, x, y), 0.0);
            }
        }
    }

    #[test]
    fn zero_threshold_flags_any_roundtrip_error() {
        let fwd = WarpField::constant(8, 8, 1.0, 0.0);
        let mut bwd = WarpField::constant(8, 8, -1.0, 0.0);
        bwd.dx[3 * 8 + 4] = -1.01;
        let m = estimate_occlusion(&fwd, &bwd, 0.0);
        assert_eq!(m.get(0, 3, 3), 1.0);
        assert_eq!(m.get(0, 1, 1), 0.0);
        assert_eq!(m.get(0, 7, 0), 1.0);
    }
}
