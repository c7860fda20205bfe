//! Procedural anomaly masks: rectangles, ellipses, random-walk blobs.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use maskdiff::attention::AnomalyMask;
use maskdiff::numerics::Rng;
use serde::{Deserialize, Serialize};

const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskShape {
    Rect,
    Ellipse,
    Blob,
    Full,
}

impl fmt::Display for MaskShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rect => "rect",
            Self::Ellipse => "ellipse",
            Self::Blob => "blob",
            Self::Full => "full",
        })
    }
}

impl FromStr for MaskShape {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rect" => Self::Rect,
            "ellipse" => Self::Ellipse,
            "blob" => Self::Blob,
            "full" => Self::Full,
            other => bail!("unknown mask shape `{other}`"),
        })
    }
}

/// Shape plus the admissible area fraction `[min_area, max_area]`.
/// Masks are drawn on a grid of `align × align` cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub shape: MaskShape,
    pub min_area: f64,
    pub max_area: f64,
    pub align: usize,
}

impl MaskSpec {
    pub fn new(shape: MaskShape, min_area: f64, max_area: f64) -> Self {
        Self { shape, min_area, max_area, align: 2 }
    }

    pub fn full() -> Self {
        Self::new(MaskShape::Full, 1.0, 1.0)
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if self.max_area.is_nan() || self.max_area <= 0.0 {
            bail!("mask area range [{}, {}] admits only empty masks", self.min_area, self.max_area);
        }
        if !(0.0..=1.0).contains(&self.min_area) || self.max_area > 1.0 || self.min_area > self.max_area {
            bail!("mask area range [{}, {}] must satisfy 0 <= min <= max <= 1", self.min_area, self.max_area);
        }
        if self.shape == MaskShape::Full && self.max_area < 1.0 {
            bail!("a full mask needs max area 1");
        }
        if self.align == 0 || size == 0 || !size.is_multiple_of(self.align) {
            bail!("mask size {size} must be a positive multiple of the alignment {}", self.align);
        }
        Ok(())
    }
}

/// Inclusive rectangle `(y0, x0)..=(y1, x1)` on a `size × size` grid.
pub fn rasterize_rect(size: usize, top_left: (usize, usize), bottom_right: (usize, usize)) -> AnomalyMask {
    AnomalyMask::from_fn(size, size, |y, x| {
        (top_left.0..=bottom_right.0).contains(&y) && (top_left.1..=bottom_right.1).contains(&x)
    })
}

fn draw_rect(n: usize, target: f64, rng: &mut Rng) -> AnomalyMask {
    let cells = target * (n * n) as f64;
    let aspect = rng.uniform_range(0.5, 2.0);
    let h = ((cells * aspect).sqrt().round() as usize).clamp(1, n);
    let w = ((cells / h as f64).round() as usize).clamp(1, n);
    let y0 = rng.below(n - h + 1);
    let x0 = rng.below(n - w + 1);
    rasterize_rect(n, (y0, x0), (y0 + h - 1, x0 + w - 1))
}

fn draw_ellipse(n: usize, target: f64, rng: &mut Rng) -> AnomalyMask {
    let cells = target * (n * n) as f64;
    let aspect = rng.uniform_range(0.5, 2.0);
    let ry = (cells * aspect / std::f64::consts::PI).sqrt().max(0.5);
    let rx = (cells / (std::f64::consts::PI * ry)).max(0.5);
    let cy = rng.uniform_range(ry.min(n as f64 / 2.0), (n as f64 - ry).max(n as f64 / 2.0));
    let cx = rng.uniform_range(rx.min(n as f64 / 2.0), (n as f64 - rx).max(n as f64 / 2.0));
    AnomalyMask::from_fn(n, n, |y, x| {
        let dy = (y as f64 + 0.5 - cy) / ry;
        let dx = (x as f64 + 0.5 - cx) / rx;
        dy * dy + dx * dx <= 1.0
    })
}

/// Grows a 4-connected region from a random seed cell.
fn draw_blob(n: usize, target: f64, rng: &mut Rng) -> AnomalyMask {
    let want = ((target * (n * n) as f64).round() as usize).clamp(1, n * n);
    let mut grid = vec![0u8; n * n];
    let mut cells = vec![rng.below(n * n)];
    grid[cells[0]] = 1;
    while cells.len() < want {
        let from = cells[rng.below(cells.len())];
        let (y, x) = (from / n, from % n);
        let next = match rng.below(4) {
            0 if y > 0 => from - n,
            1 if y + 1 < n => from + n,
            2 if x > 0 => from - 1,
            3 if x + 1 < n => from + 1,
            _ => continue,
        };
        if grid[next] == 0 {
            grid[next] = 1;
            cells.push(next);
        }
    }
    AnomalyMask::from_fn(n, n, |y, x| grid[y * n + x] == 1)
}

/// `count` masks of `size × size` with area fractions in `spec.min_area..=spec.max_area`.
pub fn gen_masks(size: usize, count: usize, spec: &MaskSpec, seed: u64) -> Result<Vec<AnomalyMask>> {
    spec.validate(size)?;
    let n = size / spec.align;
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mask = match spec.shape {
            MaskShape::Full => AnomalyMask::ones(size, size),
            shape => {
                let mut attempt = 0;
                loop {
                    let target = rng.uniform_range(spec.min_area, spec.max_area);
                    let coarse = match shape {
                        MaskShape::Rect => draw_rect(n, target, &mut rng),
                        MaskShape::Ellipse => draw_ellipse(n, target, &mut rng),
                        _ => draw_blob(n, target, &mut rng),
                    };
                    let area = coarse.area_fraction();
                    if area > 0.0 && (spec.min_area..=spec.max_area).contains(&area) {
                        break coarse.upsample(spec.align);
                    }
                    attempt += 1;
                    if attempt == MAX_ATTEMPTS {
                        bail!(
                            "could not draw mask {k} with area in [{}, {}] on a {n}x{n} grid",
                            spec.min_area,
                            spec.max_area
                        );
                    }
                }
            }
        };
        out.push(mask);
    }
    Ok(out)
}
