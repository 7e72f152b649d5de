//! Image quality metrics and brute-force field-of-view alignment.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{ssim_taps, SSIM_K1, SSIM_K2};

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            found: b.dims(),
        });
    }
    if a.channels() != b.channels() {
        return Err(Error::InvalidConfig("images differ in channel count".into()));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio for a peak value of 1, in dB. Identical
/// images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

/// Mean SSIM over all channels and pixels, with an 11-tap Gaussian window
/// (sigma 1.5) renormalized at the borders and constants `k1 = 0.01`,
/// `k2 = 0.03` for a data range of 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let taps = ssim_taps();
    let (w, h) = a.dims();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..a.channels() {
        let x: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (gauss(&x, w, h, &taps), gauss(&y, w, h, &taps));
        let (exx, eyy, exy) = (gauss(&xx, w, h, &taps), gauss(&yy, w, h, &taps), gauss(&xy, w, h, &taps));
        for i in 0..w * h {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cov = exy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (w * h * a.channels()) as f64)
}

fn gauss(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut acc, mut norm) = (0.0, 0.0);
                for k in -r..=r {
                    let (sx, sy) = if horizontal { (x + k, y) } else { (x, y + k) };
                    if sx >= 0 && sy >= 0 && sx < w as isize && sy < h as isize {
                        let t = taps[(k + r) as usize];
                        acc += t * src[sy as usize * w + sx as usize];
                        norm += t;
                    }
                }
                out[y as usize * w + x as usize] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Similarity transform about the image centre:
/// `aligned(p) = img(c + (p - c - t) / scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AlignParams {
    pub const IDENTITY: AlignParams = AlignParams {
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };
}

/// Exhaustive search grid. Translations are integer pixel steps from
/// `-trans_range` to `trans_range`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignSearch {
    pub scale_min: f64,
    pub scale_max: f64,
    pub scale_steps: usize,
    pub trans_range: i32,
}

impl Default for AlignSearch {
    fn default() -> Self {
        Self {
            scale_min: 0.95,
            scale_max: 1.05,
            scale_steps: 21,
            trans_range: 8,
        }
    }
}

impl AlignSearch {
    /// Candidate scales; values within 1e-9 of 1 are snapped to exactly 1.
    pub fn scales(&self) -> Vec<f64> {
        let n = self.scale_steps.max(1);
        (0..n)
            .map(|i| {
                let s = if n == 1 {
                    0.5 * (self.scale_min + self.scale_max)
                } else {
                    self.scale_min + (self.scale_max - self.scale_min) * i as f64 / (n - 1) as f64
                };
                if (s - 1.0).abs() < 1e-9 { 1.0 } else { s }
            })
            .collect()
    }

    pub fn scale_step(&self) -> f64 {
        if self.scale_steps > 1 {
            (self.scale_max - self.scale_min) / (self.scale_steps - 1) as f64
        } else {
            0.0
        }
    }
}

/// Resamples `img` with `params`, clamping sample positions to the border.
pub fn apply_align(img: &Image, params: &AlignParams) -> Image {
    let (w, h) = img.dims();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    Image::from_fn(w, h, img.channels(), |c, x, y| {
        let sx = cx + (x as f64 - cx - params.tx) / params.scale;
        let sy = cy + (y as f64 - cy - params.ty) / params.scale;
        img.sample_clamped(c, sx as f32, sy as f32)
    })
}

/// Finds the grid transform of `img` minimizing MSE against `reference`
/// and returns it with the aligned image. The identity is always a
/// candidate and wins ties.
pub fn fov_align(img: &Image, reference: &Image, search: &AlignSearch) -> Result<(AlignParams, Image)> {
    check_same(img, reference)?;
    let (w, h) = img.dims();
    let nc = img.channels();
    let r = search.trans_range.max(0) as usize;
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let refd = reference.data();
    let n_total = (w * h * nc) as f64;

    let mut best = (AlignParams::IDENTITY, mse(img, reference)? * n_total);
    let mut padded = vec![0.0f32; pw * ph * nc];
    for scale in search.scales() {
        // padded[(py, px)] holds the scaled image at position (px - r, py - r).
        for c in 0..nc {
            for py in 0..ph {
                for px in 0..pw {
                    let sx = cx + (px as f64 - r as f64 - cx) / scale;
                    let sy = cy + (py as f64 - r as f64 - cy) / scale;
                    padded[(c * ph + py) * pw + px] = img.sample_clamped(c, sx as f32, sy as f32);
                }
            }
        }
        for ty in -(r as i32)..=r as i32 {
            for tx in -(r as i32)..=r as i32 {
                if scale == 1.0 && tx == 0 && ty == 0 {
                    continue;
                }
                // aligned(x) = scaled(x - t) = padded[x - t + r].
                let mut acc = 0.0f64;
                'outer: for c in 0..nc {
                    for y in 0..h {
                        let py = (y as i32 - ty + r as i32) as usize;
                        let row = &padded[(c * ph + py) * pw..(c * ph + py + 1) * pw];
                        let rrow = &refd[(c * h + y) * w..(c * h + y + 1) * w];
                        let off = (r as i32 - tx) as usize;
                        let mut row_acc = 0.0f32;
                        for x in 0..w {
                            let d = row[x + off] - rrow[x];
                            row_acc += d * d;
                        }
                        acc += row_acc as f64;
                        if acc >= best.1 {
                            break 'outer;
                        }
                    }
                }
                if acc < best.1 {
                    best = (
                        AlignParams {
                            scale,
                            tx: tx as f64,
                            ty: ty as f64,
                        },
                        acc,
                    );
                }
            }
        }
    }
    let aligned = if best.0 == AlignParams::IDENTITY { img.clone() } else { apply_align(img, &best.0) };
    Ok((best.0, aligned))
}
