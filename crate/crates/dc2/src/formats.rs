//! On-disk and wire encodings: 8-bit PNG for images and masks, a raw
//! little-endian float format for depth and defocus planes and for warps.
//!
//! Raw plane: `u32 H, u32 W`, then `H*W` `f32` row-major.
//! Raw warp: `u32 H, u32 W`, then `H*W` pairs of `f32` `(dx, dy)` row-major;
//! invalid displacements are stored as NaN.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use dc2_core::align::WarpField;
use dc2_core::Image;

use crate::error::{io_err, Error, Result};

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1- or 3-channel image as an 8-bit PNG.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let (w, h) = img.dims();
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Invalid(format!("cannot write a {c}-channel image as PNG"))),
    };
    let nc = img.channels();
    let mut pixels = Vec::with_capacity(w * h * nc);
    for i in 0..w * h {
        for c in 0..nc {
            pixels.push(quantize(img.plane(c)[i]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes any PNG to floats in `[0, 1]`: grey images give one channel,
/// colour images three; alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride_c, nc) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::Png("unexpanded palette image".into())),
    };
    let row = info.line_size;
    Ok(Image::from_fn(w, h, nc, |c, x, y| buf[y * row + x * stride_c + c] as f32 / 255.0))
}

/// Three-channel view of a decoded image (grey is replicated).
pub fn to_rgb(img: Image) -> Image {
    if img.channels() == 3 {
        return img;
    }
    Image::from_fn(img.width(), img.height(), 3, |_, x, y| img.get(0, x, y))
}

/// One-channel view of a decoded image (colour is reduced to luminance).
pub fn to_gray(img: Image) -> Image {
    if img.channels() == 1 {
        img
    } else {
        img.luminance()
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_png(path: &Path) -> Result<Image> {
    decode_png(&read_bytes(path)?)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_png(img)?)
}

fn header(h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out
}

fn parse_header<'a>(bytes: &'a [u8], what: &'static str, per_pixel: usize) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 8 {
        return Err(Error::Format {
            what,
            detail: "missing header".into(),
        });
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    let expected = h.checked_mul(w).and_then(|n| n.checked_mul(4 * per_pixel));
    if expected != Some(body.len()) {
        return Err(Error::Format {
            what,
            detail: format!("{h}x{w} header but {} payload bytes", body.len()),
        });
    }
    Ok((h, w, body))
}

fn floats(body: &[u8]) -> impl Iterator<Item = f32> + '_ {
    body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
}

/// Encodes the first channel of `img` as a raw float plane.
pub fn encode_raw(img: &Image) -> Vec<u8> {
    let (w, h) = img.dims();
    let mut out = header(h, w);
    for v in img.plane(0) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    let (h, w, body) = parse_header(bytes, "raw float plane", 1)?;
    Ok(Image::from_vec(w, h, 1, floats(body).collect())?)
}

pub fn read_raw(path: &Path) -> Result<Image> {
    decode_raw(&read_bytes(path)?)
}

pub fn write_raw(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_raw(img))
}

pub fn encode_warp(field: &WarpField) -> Vec<u8> {
    let (w, h) = field.dims();
    let mut out = header(h, w);
    for i in 0..w * h {
        let (dx, dy) = if field.validity[i] > 0.0 {
            (field.dx[i], field.dy[i])
        } else {
            (f32::NAN, f32::NAN)
        };
        out.extend_from_slice(&dx.to_le_bytes());
        out.extend_from_slice(&dy.to_le_bytes());
    }
    out
}

pub fn decode_warp(bytes: &[u8]) -> Result<WarpField> {
    let (h, w, body) = parse_header(bytes, "raw warp", 2)?;
    let vals: Vec<f32> = floats(body).collect();
    let (mut dx, mut dy, mut validity) = (Vec::with_capacity(w * h), Vec::with_capacity(w * h), Vec::with_capacity(w * h));
    for p in vals.chunks_exact(2) {
        let ok = p[0].is_finite() && p[1].is_finite();
        dx.push(if ok { p[0] } else { 0.0 });
        dy.push(if ok { p[1] } else { 0.0 });
        validity.push(if ok { 1.0 } else { 0.0 });
    }
    Ok(WarpField::from_parts(w, h, dx, dy, validity)?)
}

pub fn read_warp(path: &Path) -> Result<WarpField> {
    decode_warp(&read_bytes(path)?)
}

pub fn write_warp(path: &Path, field: &WarpField) -> Result<()> {
    write_bytes(path, &encode_warp(field))
}
