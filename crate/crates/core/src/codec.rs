//! Lossless pixel ↔ latent transform (space-to-depth).
//!
//! A pixel tensor `[h, w, c]` maps to `[h/s, w/s, c·s²]`; latent channel
//! `(dy·s + dx)·c + ch` holds pixel `(y·s + dy, x·s + dx, ch)`.

use crate::attention::AnomalyMask;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Codec {
    stride: usize,
}

/// Latent tensor plus the pixel dimensions it decodes to.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    pub tensor: Tensor,
    pub pixel_dims: (usize, usize, usize),
}

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[h, w, c] => Ok((h, w, c)),
        other => Err(Error::shape(op, other, &[0, 0, 0])),
    }
}

impl Codec {
    pub fn new(stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("codec stride must be positive"));
        }
        Ok(Self { stride })
    }

    pub fn identity() -> Self {
        Self { stride: 1 }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn latent_dims(&self, h: usize, w: usize, c: usize) -> Result<(usize, usize, usize)> {
        let s = self.stride;
        if !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::Resolution {
                from: (h, w),
                to: (h / s, w / s),
            });
        }
        Ok((h / s, w / s, c * s * s))
    }

    pub fn encode(&self, img: &Tensor) -> Result<LatentImage> {
        let (h, w, c) = dims3(img, "codec_encode")?;
        let (lh, lw, lc) = self.latent_dims(h, w, c)?;
        let s = self.stride;
        let src = img.data();
        let tensor = Tensor::from_fn(&[lh, lw, lc], |i| {
            let (cell, k) = (i / lc, i % lc);
            let (y, x) = (cell / lw, cell % lw);
            let (dy, dx, ch) = (k / (s * c), (k / c) % s, k % c);
            src[((y * s + dy) * w + x * s + dx) * c + ch]
        });
        Ok(LatentImage {
            tensor,
            pixel_dims: (h, w, c),
        })
    }

    pub fn decode(&self, latent: &LatentImage) -> Result<Tensor> {
        let (lh, lw, lc) = dims3(&latent.tensor, "codec_decode")?;
        let s = self.stride;
        if lc % (s * s) != 0 {
            return Err(Error::shape("codec_decode", latent.tensor.shape(), &[lh, lw, s * s]));
        }
        let (h, w, c) = (lh * s, lw * s, lc / (s * s));
        if latent.pixel_dims != (h, w, c) {
            return Err(Error::shape(
                "codec_decode",
                &[latent.pixel_dims.0, latent.pixel_dims.1, latent.pixel_dims.2],
                &[h, w, c],
            ));
        }
        let src = latent.tensor.data();
        Tensor::new(
            &[h, w, c],
            (0..h * w * c)
                .map(|i| {
                    let (py, px, ch) = (i / (w * c), (i / c) % w, i % c);
                    let k = ((py % s) * s + px % s) * c + ch;
                    src[((py / s) * lw + px / s) * lc + k]
                })
                .collect(),
        )
    }

    /// Max-pools the pixel mask by the stride and broadcasts it over
    /// `channels`, giving a `[h/s, w/s, channels]` tensor of 0/1.
    pub fn downsample_mask(&self, mask: &AnomalyMask, channels: usize) -> Result<Tensor> {
        let (h, w) = mask.dims();
        let (lh, lw, _) = self.latent_dims(h, w, 1)?;
        let cells = mask.max_pool_to(lh, lw)?;
        let bits = cells.as_slice();
        Ok(Tensor::from_fn(&[lh, lw, channels], |i| bits[i / channels] as f32))
    }
}
