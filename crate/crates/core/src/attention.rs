//! Single-head self/cross attention with mask-driven logit enhancement.
//!
//! Cross-attention enhancement (CAE) multiplies vision-text logits by `α`
//! on anomaly rows and by `0` elsewhere. Self-attention enhancement (SAE)
//! multiplies vision-vision logits by `0` on anomaly positions and by `β`
//! elsewhere. Both act on logits only, before the softmax.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, Tensor};

/// Binary pixel mask; `1` marks where an anomaly is generated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnomalyMask {
    h: usize,
    w: usize,
    grid: Vec<u8>,
}

impl AnomalyMask {
    pub fn new(h: usize, w: usize, grid: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || grid.len() != h * w {
            return Err(Error::shape("mask", &[h, w], &[grid.len()]));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::config("mask entries must be 0 or 1"));
        }
        Ok(Self { h, w, grid })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, grid: vec![0; h * w] }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self { h, w, grid: vec![1; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let grid = (0..h * w).map(|i| f(i / w, i % w) as u8).collect();
        Self { h, w, grid }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.w + x] == 1
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.grid
    }

    pub fn count(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.grid.len() as f64
    }

    /// Max-pool to `(h, w)`; each dimension must divide evenly.
    pub fn max_pool_to(&self, h: usize, w: usize) -> Result<AnomalyMask> {
        if h == 0 || w == 0 || !self.h.is_multiple_of(h) || !self.w.is_multiple_of(w) {
            return Err(Error::Resolution {
                from: (self.h, self.w),
                to: (h, w),
            });
        }
        let (kh, kw) = (self.h / h, self.w / w);
        Ok(Self::from_fn(h, w, |y, x| {
            (0..kh).any(|dy| (0..kw).any(|dx| self.get(y * kh + dy, x * kw + dx)))
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> AnomalyMask {
        Self::from_fn(self.h * factor, self.w * factor, |y, x| self.get(y / factor, x / factor))
    }

    /// Smallest superset of this mask made of whole `stride × stride` cells.
    pub fn snap_to_grid(&self, stride: usize) -> Result<AnomalyMask> {
        if stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        Ok(self.max_pool_to(self.h / stride, self.w / stride)?.upsample(stride))
    }

    /// True if every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &AnomalyMask) -> bool {
        self.dims() == other.dims() && self.grid.iter().zip(&other.grid).all(|(&a, &b)| a <= b)
    }
}

/// One flattened binary mask per attention resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPyramid {
    levels: Vec<AnomalyMask>,
}

impl MaskPyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Flattened row-major mask of level `l`.
    pub fn level(&self, l: usize) -> &[u8] {
        self.levels[l].as_slice()
    }

    pub fn level_dims(&self, l: usize) -> (usize, usize) {
        self.levels[l].dims()
    }
}

pub fn build_pyramid(mask: &AnomalyMask, resolutions: &[(usize, usize)]) -> Result<MaskPyramid> {
    let levels = resolutions
        .iter()
        .map(|&(h, w)| mask.max_pool_to(h, w))
        .collect::<Result<_>>()?;
    Ok(MaskPyramid { levels })
}

/// Whether SAE's mask zeroes whole query rows or whole key columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaeOrientation {
    #[default]
    QueryRows,
    KeyColumns,
}

impl FromStr for SaeOrientation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rows" | "query-rows" => Ok(Self::QueryRows),
            "cols" | "key-columns" => Ok(Self::KeyColumns),
            other => Err(Error::config(format!("unknown SAE orientation `{other}`"))),
        }
    }
}

impl fmt::Display for SaeOrientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::QueryRows => "rows",
            Self::KeyColumns => "cols",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub alpha: f32,
    pub beta: f32,
    pub sae_orientation: SaeOrientation,
    pub cae: bool,
    pub sae: bool,
    /// Levels that receive enhancement; `None` means every level.
    pub enabled_levels: Option<Vec<usize>>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            beta: 1.1,
            sae_orientation: SaeOrientation::QueryRows,
            cae: true,
            sae: true,
            enabled_levels: None,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn level_enabled(&self, level: usize) -> bool {
        self.enabled_levels.as_ref().is_none_or(|ls| ls.contains(&level))
    }
}

fn check_mask_len(s: &Tensor, mask: &[u8], op: &'static str) -> Result<(usize, usize)> {
    let (n, c) = s.dims2()?;
    if mask.len() != n {
        return Err(Error::shape(op, s.shape(), &[mask.len()]));
    }
    Ok((n, c))
}

/// `S_c ⊙ M^c` where row `i` of `M^c` is `α` if `m_i = 1`, else `0`.
pub fn apply_cae(s: &Tensor, mask: &[u8], alpha: f32) -> Result<Tensor> {
    let (_, c) = check_mask_len(s, mask, "apply_cae")?;
    let mut out = s.clone();
    for (row, &m) in out.data_mut().chunks_exact_mut(c).zip(mask) {
        let factor = if m == 1 { alpha } else { 0.0 };
        row.iter_mut().for_each(|v| *v *= factor);
    }
    Ok(out)
}

/// `S_s ⊙ M^s` where `M^s` is `0` on anomaly positions and `β` elsewhere,
/// broadcast along query rows or key columns.
pub fn apply_sae(s: &Tensor, mask: &[u8], beta: f32, orientation: SaeOrientation) -> Result<Tensor> {
    let (n, c) = check_mask_len(s, mask, "apply_sae")?;
    if c != n {
        return Err(Error::shape("apply_sae", s.shape(), &[n, n]));
    }
    let factor = |m: u8| if m == 1 { 0.0 } else { beta };
    let mut out = s.clone();
    for (i, row) in out.data_mut().chunks_exact_mut(c).enumerate() {
        match orientation {
            SaeOrientation::QueryRows => {
                let f = factor(mask[i]);
                row.iter_mut().for_each(|v| *v *= f);
            }
            SaeOrientation::KeyColumns => {
                for (v, &m) in row.iter_mut().zip(mask) {
                    *v *= factor(m);
                }
            }
        }
    }
    Ok(out)
}

/// Logit re-weighting applied between `QKᵀ/√d` and the softmax.
#[derive(Clone, Copy, Debug)]
pub enum Enhancement<'a> {
    None,
    Cross { mask: &'a [u8], alpha: f32 },
    SelfAttn { mask: &'a [u8], beta: f32, orientation: SaeOrientation },
}

impl Enhancement<'_> {
    /// Elementwise and linear, so it is also its own vector-Jacobian product.
    pub fn apply(&self, s: Tensor) -> Result<Tensor> {
        match *self {
            Enhancement::None => Ok(s),
            Enhancement::Cross { mask, alpha } => apply_cae(&s, mask, alpha),
            Enhancement::SelfAttn { mask, beta, orientation } => apply_sae(&s, mask, beta, orientation),
        }
    }
}

/// Query/key/value projections. `q` maps image features; `k` and `v` map
/// the context (image features again for self-attention, text for cross).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttentionWeights {
    pub fn attn_dim(&self) -> usize {
        self.q.shape()[1]
    }
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub probs: Tensor,
    pub out: Tensor,
}

pub fn attention_forward(
    features: &Tensor,
    context: &Tensor,
    w: &AttentionWeights,
    enhancement: Enhancement<'_>,
) -> Result<AttentionTrace> {
    let q = ops::matmul(features, &w.q)?;
    let k = ops::matmul(context, &w.k)?;
    let v = ops::matmul(context, &w.v)?;
    if q.shape()[1] != k.shape()[1] || k.shape()[1] != v.shape()[1] {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    let scale = 1.0 / (w.attn_dim() as f32).sqrt();
    let logits = ops::scale(&ops::matmul_nt(&q, &k)?, scale);
    let probs = ops::softmax_rows(&enhancement.apply(logits)?)?;
    let out = ops::matmul(&probs, &v)?;
    Ok(AttentionTrace { q, k, v, probs, out })
}

pub struct AttentionGrads {
    pub features: Tensor,
    pub context: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

pub fn attention_backward(
    trace: &AttentionTrace,
    features: &Tensor,
    context: &Tensor,
    w: &AttentionWeights,
    enhancement: Enhancement<'_>,
    d_out: &Tensor,
) -> Result<AttentionGrads> {
    let (d_probs, d_v) = ops::matmul_backward(&trace.probs, &trace.v, d_out)?;
    let d_enhanced = ops::softmax_rows_backward(&trace.probs, &d_probs)?;
    let scale = 1.0 / (w.attn_dim() as f32).sqrt();
    let d_logits = ops::scale(&enhancement.apply(d_enhanced)?, scale);
    let (d_q, d_k) = ops::matmul_nt_backward(&trace.q, &trace.k, &d_logits)?;

    let (d_feat, d_wq) = ops::matmul_backward(features, &w.q, &d_q)?;
    let (d_ctx_k, d_wk) = ops::matmul_backward(context, &w.k, &d_k)?;
    let (d_ctx_v, d_wv) = ops::matmul_backward(context, &w.v, &d_v)?;
    Ok(AttentionGrads {
        features: d_feat,
        context: ops::add(&d_ctx_k, &d_ctx_v)?,
        q: d_wq,
        k: d_wk,
        v: d_wv,
    })
}

/// Vanilla self-attention output `softmax(QKᵀ/√d)·V`, `[N, d_m]`.
pub fn self_attention(features: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    Ok(attention_forward(features, features, w, Enhancement::None)?.out)
}

/// Vanilla cross-attention of image features over a text embedding.
pub fn cross_attention(features: &Tensor, prompt: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    Ok(attention_forward(features, prompt, w, Enhancement::None)?.out)
}
