//! Procedural grayscale textures standing in for normal product images.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use maskdiff::numerics::{Rng, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureClass {
    Stripes,
    Checker,
    RadialGradient,
    Blobs,
}

impl TextureClass {
    pub const ALL: [TextureClass; 4] = [Self::Stripes, Self::Checker, Self::RadialGradient, Self::Blobs];

    pub fn name(self) -> &'static str {
        match self {
            Self::Stripes => "stripes",
            Self::Checker => "checker",
            Self::RadialGradient => "radial-gradient",
            Self::Blobs => "blobs",
        }
    }

    /// Draws jittered parameters for one image of this class.
    pub fn sample(self, size: usize, rng: &mut Rng) -> TextureSpec {
        let s = size as f64;
        let (lo, hi) = {
            let lo = rng.uniform_range(0.05, 0.35);
            (lo, lo + rng.uniform_range(0.4, 0.6))
        };
        match self {
            Self::Stripes => TextureSpec::Stripes {
                period: rng.uniform_range(4.0, 8.0),
                phase: rng.uniform_range(0.0, 8.0),
                orientation: [Orientation::Horizontal, Orientation::Vertical, Orientation::Diagonal][rng.below(3)],
                lo,
                hi,
            },
            Self::Checker => TextureSpec::Checker {
                period: 4,
                offset: (rng.below(4), rng.below(4)),
                lo,
                hi,
            },
            Self::RadialGradient => TextureSpec::RadialGradient {
                center: (rng.uniform_range(0.3 * s, 0.7 * s), rng.uniform_range(0.3 * s, 0.7 * s)),
                radius: rng.uniform_range(0.5 * s, 0.8 * s),
                lo,
                hi,
            },
            Self::Blobs => {
                let n = 2 + rng.below(3);
                TextureSpec::Blobs {
                    base: lo,
                    blobs: (0..n)
                        .map(|_| Blob {
                            center: (rng.uniform_range(0.0, s), rng.uniform_range(0.0, s)),
                            sigma: rng.uniform_range(0.08 * s, 0.18 * s),
                            amplitude: rng.uniform_range(0.3, 0.6),
                        })
                        .collect(),
                }
            }
        }
    }
}

impl fmt::Display for TextureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TextureClass {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|c| c.name() == s) {
            Some(&c) => Ok(c),
            None => bail!("unknown texture class `{s}`"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    Horizontal,
    Vertical,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: (f64, f64),
    pub sigma: f64,
    pub amplitude: f64,
}

/// Fully specified texture; rendering is a pure function of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TextureSpec {
    Stripes { period: f64, phase: f64, orientation: Orientation, lo: f64, hi: f64 },
    Checker { period: usize, offset: (usize, usize), lo: f64, hi: f64 },
    RadialGradient { center: (f64, f64), radius: f64, lo: f64, hi: f64 },
    Blobs { base: f64, blobs: Vec<Blob> },
}

impl TextureSpec {
    pub fn value(&self, y: usize, x: usize) -> f64 {
        let (yf, xf) = (y as f64, x as f64);
        let v = match self {
            TextureSpec::Stripes { period, phase, orientation, lo, hi } => {
                let coord = match orientation {
                    Orientation::Horizontal => yf,
                    Orientation::Vertical => xf,
                    Orientation::Diagonal => (yf + xf) / std::f64::consts::SQRT_2,
                };
                let wave = 0.5 + 0.5 * (std::f64::consts::TAU * (coord + phase) / period).sin();
                lo + (hi - lo) * wave
            }
            TextureSpec::Checker { period, offset, lo, hi } => {
                let parity = ((y + offset.0) / period + (x + offset.1) / period) % 2;
                if parity == 0 {
                    *hi
                } else {
                    *lo
                }
            }
            TextureSpec::RadialGradient { center, radius, lo, hi } => {
                let d = ((yf - center.0).powi(2) + (xf - center.1).powi(2)).sqrt();
                lo + (hi - lo) * (1.0 - d / radius).clamp(0.0, 1.0)
            }
            TextureSpec::Blobs { base, blobs } => {
                base + blobs
                    .iter()
                    .map(|b| {
                        let d2 = (yf - b.center.0).powi(2) + (xf - b.center.1).powi(2);
                        b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
                    })
                    .sum::<f64>()
            }
        };
        v.clamp(0.0, 1.0)
    }

    /// `[size, size, 1]` image with values in `[0, 1]`.
    pub fn render(&self, size: usize) -> Tensor {
        Tensor::from_fn(&[size, size, 1], |i| self.value(i / size, i % size) as f32)
    }
}

#[derive(Clone, Debug)]
pub struct TextureSample {
    pub class: TextureClass,
    pub spec: TextureSpec,
    pub image: Tensor,
}

/// `count` images per class, in class order; `size` must divide by `stride`.
pub fn gen_textures(
    classes: &[TextureClass],
    count: usize,
    size: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<TextureSample>> {
    if size == 0 || stride == 0 || !size.is_multiple_of(stride) {
        bail!("texture size {size} must be a positive multiple of the codec stride {stride}");
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(classes.len() * count);
    for &class in classes {
        for _ in 0..count {
            let spec = class.sample(size, &mut rng);
            let image = spec.render(size);
            out.push(TextureSample { class, spec, image });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_is_empty() {
        assert!(gen_textures(&TextureClass::ALL, 0, 32, 2, 1).unwrap().is_empty());
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = gen_textures(&TextureClass::ALL, 3, 32, 2, 9).unwrap();
        let b = gen_textures(&TextureClass::ALL, 3, 32, 2, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn checker_matches_closed_form() {
        let spec = TextureSpec::Checker { period: 4, offset: (0, 0), lo: 0.25, hi: 0.75 };
        let img = spec.render(16);
        for y in 0..16 {
            for x in 0..16 {
                let expected = if (y / 4 + x / 4) % 2 == 0 { 0.75 } else { 0.25 };
                assert_eq!(img.data()[y * 16 + x], expected);
            }
        }
        assert_eq!(img.data()[0], img.data()[4 * 16 + 4]);
        assert_ne!(img.data()[0], img.data()[4]);
    }

    #[test]
    fn values_in_unit_range() {
        for s in gen_textures(&TextureClass::ALL, 5, 32, 2, 3).unwrap() {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_indivisible_size() {
        assert!(gen_textures(&TextureClass::ALL, 1, 33, 2, 0).is_err());
    }

    #[test]
    fn class_names_parse() {
        for c in TextureClass::ALL {
            assert_eq!(c.name().parse::<TextureClass>().unwrap(), c);
        }
        assert!("wood".parse::<TextureClass>().is_err());
    }
}
