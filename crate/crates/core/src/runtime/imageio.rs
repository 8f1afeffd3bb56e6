//! 8-bit PNG import/export, checkerboard previews and image grids.
//!
//! In memory an image is a `[C, H, W]` tensor with values in `[0, 1]`
//! (C = 3 for RGB, 4 for RGBA).

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage, RgbaImage};

use crate::compositor::LayerImage;
use crate::error::{CganError, Result};
use crate::fsio;
use crate::tensor::Tensor;

/// Side length of a preview checkerboard cell, in pixels.
pub const CHECKER_CELL: usize = 8;
pub const CHECKER_LIGHT: f64 = 0.8;
pub const CHECKER_DARK: f64 = 0.6;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f64 {
    v as f64 / 255.0
}

fn chw(image: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != channels {
        return Err(CganError::Dimension(format!(
            "expected a [{channels}, H, W] image, got {s:?}"
        )));
    }
    Ok((s[1], s[2]))
}

fn encode_png(img: DynamicImage, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| CganError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(buf.into_inner())
}

/// Interleaved 8-bit samples of a planar `[C, H, W]` image.
fn interleave(image: &Tensor, channels: usize) -> Result<(u32, u32, Vec<u8>)> {
    let (h, w) = chw(image, channels)?;
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(plane * channels);
    for i in 0..plane {
        for c in 0..channels {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok((w as u32, h as u32, out))
}

pub fn encode_rgb_png(image: &Tensor, path: &Path) -> Result<Vec<u8>> {
    let (w, h, raw) = interleave(image, 3)?;
    let img = RgbImage::from_raw(w, h, raw).expect("buffer matches extents");
    encode_png(DynamicImage::ImageRgb8(img), path)
}

pub fn encode_rgba_png(image: &Tensor, path: &Path) -> Result<Vec<u8>> {
    let (w, h, raw) = interleave(image, 4)?;
    let img = RgbaImage::from_raw(w, h, raw).expect("buffer matches extents");
    encode_png(DynamicImage::ImageRgba8(img), path)
}

/// Writes a `[3, H, W]` image as an 8-bit RGB PNG, atomically.
pub fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    fsio::write_atomic(path, &encode_rgb_png(image, path)?)
}

/// Writes a `[4, H, W]` image as an 8-bit RGBA PNG, atomically.
pub fn write_rgba(path: &Path, image: &Tensor) -> Result<()> {
    fsio::write_atomic(path, &encode_rgba_png(image, path)?)
}

/// Writes item `index` of a layer batch as an RGBA PNG.
pub fn write_layer(path: &Path, layer: &LayerImage, index: usize) -> Result<()> {
    write_rgba(path, &layer.item(index).to_rgba().unstack().remove(0))
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = fsio::read(path)?;
    image::load_from_memory(&bytes).map_err(|source| CganError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn planar(raw: &[u8], channels: usize, h: usize, w: usize) -> Tensor {
    let plane = h * w;
    Tensor::from_fn(&[channels, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        dequantize(raw[p * channels + c])
    })
}

/// Reads any supported image as `[4, H, W]` RGBA.
pub fn read_rgba(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.into_rgba8();
    let (w, h) = img.dimensions();
    Ok(planar(img.as_raw(), 4, h as usize, w as usize))
}

/// Reads any supported image as `[3, H, W]` RGB; transparency is flattened over white.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    Ok(flatten_over_white(&read_rgba(path)?))
}

/// Reads an RGBA PNG back into a single-item layer.
pub fn read_layer(path: &Path) -> Result<LayerImage> {
    let rgba = read_rgba(path)?;
    let (h, w) = (rgba.shape()[1], rgba.shape()[2]);
    LayerImage::from_rgba(&rgba.reshape(&[1, 4, h, w])?)
}

/// `rgb * a + (1 - a)` for a `[4, H, W]` image.
pub fn flatten_over_white(rgba: &Tensor) -> Tensor {
    let (h, w) = (rgba.shape()[1], rgba.shape()[2]);
    let plane = h * w;
    let d = rgba.data();
    Tensor::from_fn(&[3, h, w], |i| {
        let a = d[3 * plane + i % plane];
        d[i] * a + (1.0 - a)
    })
}

/// The checkerboard shown behind transparent regions.
pub fn checkerboard(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[3, h, w], |i| {
        let p = i % (h * w);
        let (y, x) = (p / w, p % w);
        if (y / CHECKER_CELL + x / CHECKER_CELL).is_multiple_of(2) {
            CHECKER_LIGHT
        } else {
            CHECKER_DARK
        }
    })
}

/// A `[4, H, W]` layer drawn over the checkerboard, as `[3, H, W]`.
pub fn preview_on_checkerboard(rgba: &Tensor) -> Result<Tensor> {
    let (h, w) = chw(rgba, 4)?;
    let board = checkerboard(h, w);
    let plane = h * w;
    let d = rgba.data();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let a = d[3 * plane + i % plane];
        d[i] * a + board.data()[i] * (1.0 - a)
    }))
}

/// Tiles equally sized `[3, H, W]` images row-major into `cols` columns with a
/// white gutter of `pad` pixels.
pub fn grid(images: &[Tensor], cols: usize, pad: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| CganError::Argument("grid of zero images".into()))?;
    if cols == 0 {
        return Err(CganError::Argument("grid needs at least one column".into()));
    }
    let (h, w) = chw(first, 3)?;
    let rows = images.len().div_ceil(cols);
    let gh = rows * h + (rows + 1) * pad;
    let gw = cols * w + (cols + 1) * pad;
    let mut out = Tensor::full(&[3, gh, gw], 1.0);
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(CganError::Dimension(format!(
                "grid images differ: {:?} vs {:?}",
                img.shape(),
                first.shape()
            )));
        }
        let (r, c) = (k / cols, k % cols);
        let (y0, x0) = (pad + r * (h + pad), pad + c * (w + pad));
        let src = img.data();
        let dst = out.data_mut();
        for ch in 0..3 {
            for y in 0..h {
                let s = ch * h * w + y * w;
                let d = ch * gh * gw + (y0 + y) * gw + x0;
                dst[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Ok(out)
}
