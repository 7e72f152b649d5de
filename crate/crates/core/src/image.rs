//! Planar floating-point images.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dims, Error, Result};

/// A planar (channel-major) `f32` image. Pixel `(x, y)` of channel `c` lives
/// at `data[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::InvalidConfig(alloc::format!(
                "buffer of {} values cannot hold {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(channel, x, y)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, x, y));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(width, height)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Extracts a single channel as a one-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.plane(c).to_vec(),
        }
    }

    /// Stacks images with equal dimensions along the channel axis.
    pub fn stack(parts: &[&Image]) -> Result<Image> {
        let first = parts.first().ok_or(Error::Empty("no images to stack"))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            check_dims(first.dims(), p.dims())?;
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(Image {
            width: first.width,
            height: first.height,
            channels,
            data,
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Domain(alloc::format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Image::new(width, height, self.channels);
        for c in 0..self.channels {
            for y in 0..height {
                let src = &self.plane(c)[(y0 + y) * self.width + x0..][..width];
                out.plane_mut(c)[y * width..(y + 1) * width].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    /// Writes `src` into this image with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, src: &Image, x0: usize, y0: usize) {
        for c in 0..self.channels.min(src.channels) {
            for y in 0..src.height {
                let w = self.width;
                let row = &mut self.plane_mut(c)[(y0 + y) * w + x0..][..src.width];
                row.copy_from_slice(&src.plane(c)[y * src.width..(y + 1) * src.width]);
            }
        }
    }

    /// 2x2 area-average downsampling. Odd trailing rows/columns are dropped.
    pub fn downsample2(&self) -> Image {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = Image::new(w, h, self.channels);
        for c in 0..self.channels {
            let src = self.plane(c);
            let sw = self.width;
            let dst = out.plane_mut(c);
            for y in 0..h {
                for x in 0..w {
                    let i = 2 * y * sw + 2 * x;
                    dst[y * w + x] = 0.25 * (src[i] + src[i + 1] + src[i + sw] + src[i + sw + 1]);
                }
            }
        }
        out
    }

    /// Rec. 601 luma of a three-channel image; one-channel images are copied.
    pub fn luminance(&self) -> Image {
        if self.channels < 3 {
            return self.channel(0);
        }
        let n = self.width * self.height;
        let mut out = Image::new(self.width, self.height, 1);
        for i in 0..n {
            out.data[i] =
                0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i];
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear sample of channel `c` at continuous pixel coordinates, `None`
    /// when the position lies outside `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn sample_bilinear(&self, c: usize, x: f32, y: f32) -> Option<f32> {
        let (w, h) = (self.width as f32, self.height as f32);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        Some(self.sample_clamped(c, x, y))
    }

    /// Bilinear sample with coordinates clamped to the image border.
    #[inline]
    pub fn sample_clamped(&self, c: usize, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = x as usize;
        let y0 = y as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let p = self.plane(c);
        let w = self.width;
        let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
        let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Reflects an index into `[0, n)` using half-sample symmetric boundaries
/// (`d c b a | a b c d | d c b a`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_half_sample_symmetry() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = Image::from_fn(4, 2, 1, |_, x, y| (x + 4 * y) as f32);
        let d = img.downsample2();
        assert_eq!(d.dims(), (2, 1));
        assert_eq!(d.data(), &[2.5, 4.5]);
    }

    #[test]
    fn crop_and_paste_roundtrip() {
        let img = Image::from_fn(6, 5, 2, |c, x, y| (c * 100 + y * 10 + x) as f32);
        let part = img.crop(1, 2, 3, 2).unwrap();
        assert_eq!(part.get(1, 0, 0), 121.0);
        let mut canvas = Image::new(6, 5, 2);
        canvas.paste(&part, 1, 2);
        assert_eq!(canvas.get(0, 3, 3), img.get(0, 3, 3));
        assert!(img.crop(4, 0, 3, 1).is_err());
    }

    #[test]
    fn bilinear_sampling_interpolates_and_rejects_outside() {
        let img = Image::from_fn(3, 3, 1, |_, x, _| x as f32);
        assert_eq!(img.sample_bilinear(0, 1.25, 1.0), Some(1.25));
        assert_eq!(img.sample_bilinear(0, 2.5, 1.0), None);
        assert_eq!(img.sample_clamped(0, 7.0, -3.0), 2.0);
    }
}
