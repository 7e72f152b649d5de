//! User-facing target defocus descriptions and full-image rendering.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::dfnet::{Dfnet, NetInput};
use crate::error::{check_dims, Error, Result};
use crate::image::Image;
use crate::optics::{defocus_map, CameraIntrinsics, DefocusMap, DepthMap, LensState};

/// Width in pixels of the transition band of [`DefocusSpec::Masked`].
pub const MASK_FEATHER_PX: f32 = 2.0;

/// Description of a target defocus map.
#[derive(Debug, Clone, PartialEq)]
pub enum DefocusSpec {
    /// Thin-lens map for a virtual aperture and focus distance.
    Physical { aperture_mm: f64, focus_distance_mm: f64 },
    /// All-in-focus target.
    Zeros,
    /// Radius grows linearly with the distance to a line.
    Tiltshift(TiltShift),
    /// `fg_radius_px` where `mask > 0.5`, `bg_radius_px` elsewhere.
    Masked { mask: Image, fg_radius_px: f32, bg_radius_px: f32 },
    /// A precomputed map, validated and passed through.
    Explicit { map: Image },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltShift {
    /// A point on the in-focus line; the image centre `(W/2, H/2)` if absent.
    #[serde(default)]
    pub point: Option<[f64; 2]>,
    /// Direction of the line in degrees, counter-clockwise from +x.
    #[serde(default)]
    pub angle_deg: f64,
    pub slope_px_per_px: f64,
    pub max_radius_px: f64,
}

/// Inputs a spec may need besides the image size.
#[derive(Debug, Clone, Copy)]
pub struct SpecContext<'a> {
    pub dims: (usize, usize),
    pub depth: Option<&'a DepthMap>,
    pub camera: Option<&'a CameraIntrinsics>,
    /// Upper bound on every produced radius.
    pub max_radius_px: f32,
}

pub const DEFAULT_MAX_RADIUS_PX: f32 = 64.0;

fn check_radius(name: &str, r: f64, limit: f32) -> Result<()> {
    if !(r.is_finite() && r >= 0.0 && r <= limit as f64) {
        return Err(Error::Domain(format!("{name} = {r} must lie in [0, {limit}]")));
    }
    Ok(())
}

/// Builds the defocus map described by `spec`.
pub fn build_defocus_map(spec: &DefocusSpec, ctx: &SpecContext) -> Result<DefocusMap> {
    let (w, h) = ctx.dims;
    let limit = ctx.max_radius_px;
    match spec {
        DefocusSpec::Physical {
            aperture_mm,
            focus_distance_mm,
        } => {
            let depth = ctx.depth.ok_or_else(|| Error::Domain("physical defocus needs a depth map".into()))?;
            let cam = ctx.camera.ok_or_else(|| Error::Domain("physical defocus needs camera intrinsics".into()))?;
            let cam = cam.with_aperture(*aperture_mm);
            let mut map = defocus_map(&cam, &LensState::new(*focus_distance_mm), depth)?;
            map.radii = map.radii.map(|r| r.min(limit));
            Ok(map)
        }
        DefocusSpec::Zeros => Ok(DefocusMap::zeros(w, h)),
        DefocusSpec::Tiltshift(t) => {
            check_radius("max_radius_px", t.max_radius_px, limit)?;
            if !(t.slope_px_per_px.is_finite() && t.slope_px_per_px >= 0.0) {
                return Err(Error::Domain(format!("slope {} must be finite and non-negative", t.slope_px_per_px)));
            }
            if !t.angle_deg.is_finite() {
                return Err(Error::Domain("angle must be finite".into()));
            }
            let [px, py] = t.point.unwrap_or([w as f64 / 2.0, h as f64 / 2.0]);
            let (s, c) = t.angle_deg.to_radians().sin_cos();
            DefocusMap::from_radii(Image::from_fn(w, h, 1, |_, x, y| {
                let dist = ((x as f64 - px) * s - (y as f64 - py) * c).abs();
                (t.slope_px_per_px * dist).clamp(0.0, t.max_radius_px) as f32
            }))
        }
        DefocusSpec::Masked {
            mask,
            fg_radius_px,
            bg_radius_px,
        } => {
            check_radius("fg_radius_px", *fg_radius_px as f64, limit)?;
            check_radius("bg_radius_px", *bg_radius_px as f64, limit)?;
            check_dims(ctx.dims, mask.dims())?;
            if mask.channels() != 1 || !mask.is_finite() {
                return Err(Error::Domain("mask must be a finite single-channel image".into()));
            }
            let alpha = feathered_mask(mask);
            let (fg, bg) = (*fg_radius_px, *bg_radius_px);
            DefocusMap::from_radii(alpha.map(|a| (bg + (fg - bg) * a).max(0.0)))
        }
        DefocusSpec::Explicit { map } => {
            check_dims(ctx.dims, map.dims())?;
            let m = DefocusMap::from_radii(map.clone())?;
            if m.max_radius() > limit {
                return Err(Error::Domain(format!(
                    "explicit map radius {} exceeds the limit {limit}",
                    m.max_radius()
                )));
            }
            Ok(m)
        }
    }
}

/// Soft version of the binarized mask. The boundary sits halfway between
/// neighbouring pixels of opposite label and the weight ramps linearly
/// across [`MASK_FEATHER_PX`].
pub fn feathered_mask(mask: &Image) -> Image {
    let (w, h) = mask.dims();
    let inside: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    let reach = MASK_FEATHER_PX.ceil() as isize;
    Image::from_fn(w, h, 1, |_, x, y| {
        let me = inside[y * w + x];
        let mut nearest = f32::INFINITY;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                    continue;
                }
                if inside[sy as usize * w + sx as usize] != me {
                    nearest = nearest.min(((dx * dx + dy * dy) as f32).sqrt());
                }
            }
        }
        let signed = if me { nearest - 0.5 } else { 0.5 - nearest };
        (0.5 + signed / MASK_FEATHER_PX).clamp(0.0, 1.0)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    /// Largest tile side; rounded down to a multiple of 8.
    pub max_tile: usize,
    /// Width of the feathered seam between the kept parts of two tiles.
    pub overlap: usize,
    /// Context margin a tile reads beyond its kept part on sides that border
    /// another tile; covers the network's effective receptive field.
    #[serde(default = "default_halo")]
    pub halo: usize,
}

fn default_halo() -> usize {
    64
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            max_tile: 512,
            overlap: 32,
            halo: default_halo(),
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.max_tile / 8 * 8;
        if t == 0 || self.span().div_ceil(8) * 8 >= t {
            return Err(Error::InvalidConfig(format!(
                "tile {} must exceed overlap {} plus twice the halo {}, rounded up to a multiple of 8",
                self.max_tile, self.overlap, self.halo
            )));
        }
        Ok(())
    }

    /// Minimum overlap of neighbouring tile windows.
    fn span(&self) -> usize {
        self.overlap + 2 * self.halo
    }
}

/// Start offsets of tiles of size `tile` covering `len`, with neighbours
/// overlapping by at least `overlap`. Both sizes are multiples of 8 and so
/// are the offsets, keeping every tile on the full frame's pooling grid.
fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    debug_assert!(len.is_multiple_of(8) && tile.is_multiple_of(8));
    if len <= tile {
        return vec![0];
    }
    let (l, t, o) = (len / 8, tile / 8, overlap.div_ceil(8));
    let n = (l - o).div_ceil(t - o);
    let span = l - t;
    (0..n).map(|i| (i * span + (n - 1) / 2) / (n - 1) * 8).collect()
}

/// Per-pixel blend weight along one axis of a tile. On sides that border
/// another tile the first `halo` pixels get no weight and the next `overlap`
/// ramp up linearly.
fn ramp(len: usize, tiles: &TileConfig, ramp_lo: bool, ramp_hi: bool) -> Vec<f32> {
    let w = |d: usize| {
        if d < tiles.halo {
            0.0
        } else {
            ((d - tiles.halo) as f32 + 0.5) / tiles.overlap.max(1) as f32
        }
    };
    (0..len)
        .map(|i| {
            let mut v = 1.0f32;
            if ramp_lo {
                v = v.min(w(i));
            }
            if ramp_hi {
                v = v.min(w(len - 1 - i));
            }
            v.min(1.0)
        })
        .collect()
}

/// Full-resolution prediction for `input`, tiled when it exceeds the
/// configured tile size. Every tile carries its true offset so radial masks
/// match the full frame.
pub fn render_tiled(model: &Dfnet<f32>, input: &NetInput, tiles: &TileConfig) -> Result<Image> {
    tiles.validate()?;
    input.validate()?;
    let (w, h) = input.dims();
    let t = tiles.max_tile / 8 * 8;
    if w <= t && h <= t {
        return Ok(model.forward(input)?.output().clone());
    }
    let (tw, th) = (w.min(t), h.min(t));
    let xs = tile_starts(w, tw, tiles.span());
    let ys = tile_starts(h, th, tiles.span());
    let mut acc = Image::new(w, h, 3);
    let mut wsum = vec![0.0f32; w * h];
    for (iy, &y0) in ys.iter().enumerate() {
        let wy = ramp(th, tiles, iy > 0, iy + 1 < ys.len());
        for (ix, &x0) in xs.iter().enumerate() {
            let wx = ramp(tw, tiles, ix > 0, ix + 1 < xs.len());
            let out = model.forward(&input.crop(x0, y0, tw, th)?)?;
            let img = out.output();
            for c in 0..3 {
                let src = img.plane(c);
                let dst = acc.plane_mut(c);
                for y in 0..th {
                    for x in 0..tw {
                        dst[(y0 + y) * w + x0 + x] += wy[y] * wx[x] * src[y * tw + x];
                    }
                }
            }
            for y in 0..th {
                for x in 0..tw {
                    wsum[(y0 + y) * w + x0 + x] += wy[y] * wx[x];
                }
            }
        }
    }
    for c in 0..3 {
        for (v, s) in acc.plane_mut(c).iter_mut().zip(&wsum) {
            *v /= *s;
        }
    }
    Ok(acc)
}

/// Replicates the last row and column until both sides are multiples of 8.
pub fn pad_to_multiple_of_8(img: &Image) -> Image {
    let (w, h) = img.dims();
    let (pw, ph) = (w.div_ceil(8).max(1) * 8, h.div_ceil(8).max(1) * 8);
    if (pw, ph) == (w, h) {
        return img.clone();
    }
    Image::from_fn(pw, ph, img.channels(), |c, x, y| img.get(c, x.min(w - 1), y.min(h - 1)))
}

/// Session planes needed to render one target.
#[derive(Debug, Clone, Copy)]
pub struct RenderPlanes<'a> {
    pub w_image: &'a Image,
    pub uw_warped: &'a Image,
    pub occlusion: &'a Image,
    pub ref_defocus: &'a Image,
    pub tgt_defocus: &'a Image,
}

/// Renders images of any size: pads to a multiple of 8, runs the tiled
/// model and crops back.
pub fn render(model: &Dfnet<f32>, planes: &RenderPlanes, tiles: &TileConfig) -> Result<Image> {
    let dims = planes.w_image.dims();
    if dims.0 == 0 || dims.1 == 0 {
        return Err(Error::Empty("image has no pixels"));
    }
    for p in [planes.uw_warped, planes.occlusion, planes.ref_defocus, planes.tgt_defocus] {
        check_dims(dims, p.dims())?;
    }
    let input = NetInput::full_frame(
        pad_to_multiple_of_8(planes.w_image),
        pad_to_multiple_of_8(planes.uw_warped),
        pad_to_multiple_of_8(planes.occlusion),
        pad_to_multiple_of_8(planes.ref_defocus),
        pad_to_multiple_of_8(planes.tgt_defocus),
    )?;
    let out = render_tiled(model, &input, tiles)?;
    if out.dims() == dims {
        Ok(out)
    } else {
        out.crop(0, 0, dims.0, dims.1)
    }
}
