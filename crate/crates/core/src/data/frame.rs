use std::path::Path;

use image::{DynamicImage, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// 8-bit RGB `S×S` → `[3,S,S]`, scaled to `[0,1]` then standardized per channel.
pub fn normalize_frame<T: Scalar>(image: &RgbImage, size: usize) -> Result<Tensor<T>> {
    let (w, h) = image.dimensions();
    if w as usize != size || h as usize != size {
        return Err(Error::Data(format!("frame is {w}x{h}, expected {size}x{size}")));
    }
    let plane = size * size;
    let mut out = vec![T::zero(); 3 * plane];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            let v = px.0[c] as f64 / 255.0;
            out[c * plane + i] = T::lit((v - CHANNEL_MEAN[c]) / CHANNEL_STD[c]);
        }
    }
    Tensor::new(&[3, size, size], out)
}

/// Inverse of [`normalize_frame`], rounding to the nearest 8-bit value.
pub fn denormalize_frame<T: Scalar>(frame: &Tensor<T>) -> Result<RgbImage> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::shape("denormalize_frame", shape, &[3, 0, 0]));
    }
    let size = shape[1];
    let plane = size * size;
    let d = frame.data();
    Ok(RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        let mut px = [0u8; 3];
        for c in 0..3 {
            let v = (d[c * plane + i].as_f64() * CHANNEL_STD[c] + CHANNEL_MEAN[c]) * 255.0;
            px[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        image::Rgb(px)
    }))
}

/// Decodes an 8-bit RGB image; other pixel formats are rejected.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        other => Err(Error::Data(format!(
            "{}: expected 8-bit RGB, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn load_frame<T: Scalar>(path: &Path, size: usize) -> Result<Tensor<T>> {
    normalize_frame(&read_rgb(path)?, size)
        .map_err(|e| e.context(path.display()))
}
