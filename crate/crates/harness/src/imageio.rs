//! 8-bit PNG I/O. Images map to `[h, w, c]` tensors in `[0, 1]`; masks are
//! single-channel with nonzero meaning anomaly.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{ColorType, DynamicImage, GrayImage, ImageFormat, RgbImage};
use maskdiff::attention::AnomalyMask;
use maskdiff::numerics::Tensor;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// What writing and re-reading `t` as 8-bit would give.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| to_u8(v) as f32 / 255.0)
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).with_context(|| format!("reading image {}", path.display()))
}

/// Grayscale files load with one channel, everything else as RGB.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16 => (1, img.to_luma8().into_raw()),
        _ => (3, img.to_rgb8().into_raw()),
    };
    Ok(Tensor::new(&[h, w, c], raw.into_iter().map(|b| b as f32 / 255.0).collect())?)
}

pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, c) = match t.shape() {
        &[h, w, c] => (h as u32, w as u32, c),
        other => bail!("expected an [h, w, c] image, got shape {other:?}"),
    };
    let raw: Vec<u8> = t.data().iter().map(|&v| to_u8(v)).collect();
    let img = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).expect("buffer size matches")),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("buffer size matches")),
        _ => bail!("can only write 1- or 3-channel images, got {c}"),
    };
    img.save_with_format(path, ImageFormat::Png)
        .with_context(|| format!("writing image {}", path.display()))
}

pub fn load_mask(path: &Path) -> Result<AnomalyMask> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bits = img.into_raw().into_iter().map(|b| u8::from(b != 0)).collect();
    Ok(AnomalyMask::new(h, w, bits)?)
}

pub fn save_mask(path: &Path, mask: &AnomalyMask) -> Result<()> {
    let (h, w) = mask.dims();
    let raw = mask.as_slice().iter().map(|&b| b * 255).collect();
    GrayImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer size matches")
        .save_with_format(path, ImageFormat::Png)
        .with_context(|| format!("writing mask {}", path.display()))
}
