//! Forward and backward passes of the ε-predictor.
//!
//! ```text
//! x   = z·W_in + b_in + (emb(t)·W_t + b_t)
//! h_0 = block_0(x),  h_l = block_l(avgpool(h_{l−1}))
//! u_L = h_L,         u_l = h_l + upsample(u_{l+1})
//! ε̂   = u_0·W_out + b_out
//! ```

use super::weights::{Block, DenoiserWeights};
use crate::attention::{attention_backward, attention_forward, AttentionConfig, AttentionTrace, Enhancement, MaskPyramid};
use crate::error::{Error, Result};
use crate::numerics::{ops, Tensor};

/// Sinusoidal embedding of a (possibly fractional) timestep, `[1, dim]`.
pub fn timestep_embedding(timestep: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let k = i % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = timestep * freq;
        (if i < half { arg.sin() } else { arg.cos() }) as f32
    })
}

/// Per-level attention modifiers for one forward pass.
#[derive(Clone, Copy)]
pub(crate) struct LevelEnhancement<'a> {
    pub self_attn: Enhancement<'a>,
    pub cross_attn: Enhancement<'a>,
}

impl LevelEnhancement<'_> {
    const NONE: LevelEnhancement<'static> = LevelEnhancement {
        self_attn: Enhancement::None,
        cross_attn: Enhancement::None,
    };
}

pub(crate) fn level_enhancements<'a>(
    weights: &DenoiserWeights,
    cfg: &AttentionConfig,
    pyramid: Option<&'a MaskPyramid>,
) -> Result<Vec<LevelEnhancement<'a>>> {
    let levels = weights.config.levels;
    let Some(pyramid) = pyramid else {
        return Ok(vec![LevelEnhancement::NONE; levels]);
    };
    cfg.validate()?;
    if pyramid.len() != levels {
        return Err(Error::config(format!(
            "mask pyramid has {} levels, network has {levels}",
            pyramid.len()
        )));
    }
    (0..levels)
        .map(|l| {
            if pyramid.level_dims(l) != weights.config.grid(l) {
                let (h, w) = pyramid.level_dims(l);
                let (gh, gw) = weights.config.grid(l);
                return Err(Error::shape("mask_pyramid", &[h, w], &[gh, gw]));
            }
            if !cfg.level_enabled(l) {
                return Ok(LevelEnhancement::NONE);
            }
            let mask = pyramid.level(l);
            Ok(LevelEnhancement {
                self_attn: if cfg.sae {
                    Enhancement::SelfAttn {
                        mask,
                        beta: cfg.beta,
                        orientation: cfg.sae_orientation,
                    }
                } else {
                    Enhancement::None
                },
                cross_attn: if cfg.cae {
                    Enhancement::Cross { mask, alpha: cfg.alpha }
                } else {
                    Enhancement::None
                },
            })
        })
        .collect()
}

struct BlockTrace {
    input: Tensor,
    self_attn: AttentionTrace,
    after_self: Tensor,
    cross_attn: AttentionTrace,
    after_cross: Tensor,
    mlp_pre: Tensor,
    mlp_act: Tensor,
}

fn block_forward(
    block: &Block,
    x: Tensor,
    prompt: &Tensor,
    enh: LevelEnhancement<'_>,
) -> Result<(Tensor, BlockTrace)> {
    let sa = attention_forward(&x, &x, &block.self_attn, enh.self_attn)?;
    let after_self = ops::add(&x, &ops::matmul(&sa.out, &block.self_out)?)?;
    let ca = attention_forward(&after_self, prompt, &block.cross_attn, enh.cross_attn)?;
    let after_cross = ops::add(&after_self, &ops::matmul(&ca.out, &block.cross_out)?)?;
    let mlp_pre = ops::add_row(&ops::matmul(&after_cross, &block.mlp.w1)?, &block.mlp.b1)?;
    let mlp_act = ops::silu(&mlp_pre);
    let mlp_out = ops::add_row(&ops::matmul(&mlp_act, &block.mlp.w2)?, &block.mlp.b2)?;
    let out = ops::add(&after_cross, &mlp_out)?;
    Ok((
        out,
        BlockTrace {
            input: x,
            self_attn: sa,
            after_self,
            cross_attn: ca,
            after_cross,
            mlp_pre,
            mlp_act,
        },
    ))
}

/// Returns the gradient w.r.t. the block input; parameter gradients go to `grads`.
fn block_backward(
    block: &Block,
    trace: &BlockTrace,
    prompt: &Tensor,
    enh: LevelEnhancement<'_>,
    d_out: &Tensor,
    grads: &mut Block,
) -> Result<Tensor> {
    let (d_act, d_w2) = ops::matmul_backward(&trace.mlp_act, &block.mlp.w2, d_out)?;
    grads.mlp.w2 = d_w2;
    grads.mlp.b2 = ops::add_row_backward(d_out)?;
    let d_pre = ops::silu_backward(&trace.mlp_pre, &d_act)?;
    let (d_cross_in, d_w1) = ops::matmul_backward(&trace.after_cross, &block.mlp.w1, &d_pre)?;
    grads.mlp.w1 = d_w1;
    grads.mlp.b1 = ops::add_row_backward(&d_pre)?;
    let d_after_cross = ops::add(d_out, &d_cross_in)?;

    let (d_ca_out, d_cross_out) = ops::matmul_backward(&trace.cross_attn.out, &block.cross_out, &d_after_cross)?;
    grads.cross_out = d_cross_out;
    let cg = attention_backward(
        &trace.cross_attn,
        &trace.after_self,
        prompt,
        &block.cross_attn,
        enh.cross_attn,
        &d_ca_out,
    )?;
    grads.cross_attn.q = cg.q;
    grads.cross_attn.k = cg.k;
    grads.cross_attn.v = cg.v;
    let d_after_self = ops::add(&d_after_cross, &cg.features)?;

    let (d_sa_out, d_self_out) = ops::matmul_backward(&trace.self_attn.out, &block.self_out, &d_after_self)?;
    grads.self_out = d_self_out;
    let sg = attention_backward(
        &trace.self_attn,
        &trace.input,
        &trace.input,
        &block.self_attn,
        enh.self_attn,
        &d_sa_out,
    )?;
    grads.self_attn.q = sg.q;
    grads.self_attn.k = sg.k;
    grads.self_attn.v = sg.v;
    ops::add(&ops::add(&d_after_self, &sg.features)?, &sg.context)
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardTrace {
    tokens: Tensor,
    time_emb: Tensor,
    blocks: Vec<BlockTrace>,
    merged: Tensor,
}

/// Runs the network on `latent: [h, w, c]`; returns `[h, w, c]` and the trace.
pub(crate) fn forward(
    weights: &DenoiserWeights,
    latent: &Tensor,
    prompt: &Tensor,
    timestep: f64,
    enh: &[LevelEnhancement<'_>],
) -> Result<(Tensor, ForwardTrace)> {
    let cfg = &weights.config;
    if latent.shape() != cfg.latent_shape() {
        return Err(Error::shape("predict_eps", latent.shape(), &cfg.latent_shape()));
    }
    if prompt.dims2()?.1 != cfg.text_dim {
        return Err(Error::shape("predict_eps_prompt", prompt.shape(), &[0, cfg.text_dim]));
    }
    let n = cfg.latent_h * cfg.latent_w;
    let tokens = latent.clone().reshape(&[n, cfg.channels])?;
    let time_emb = timestep_embedding(timestep, cfg.time_dim);
    let temb = ops::add_row(&ops::matmul(&time_emb, &weights.time_w)?, &weights.time_b)?;
    let x = ops::add_row(&ops::matmul(&tokens, &weights.input_w)?, &weights.input_b)?;
    let mut x = ops::add_row(&x, &temb)?;

    let mut outputs = Vec::with_capacity(cfg.levels);
    let mut traces = Vec::with_capacity(cfg.levels);
    for (l, block) in weights.blocks.iter().enumerate() {
        if l > 0 {
            x = ops::avg_pool(&outputs[l - 1], cfg.grid(l - 1), 2)?;
        }
        let (out, trace) = block_forward(block, x.clone(), prompt, enh[l])?;
        outputs.push(out);
        traces.push(trace);
    }
    let mut merged = outputs.pop().expect("at least one level");
    for l in (0..cfg.levels - 1).rev() {
        let up = ops::upsample_nearest(&merged, cfg.grid(l + 1), 2)?;
        merged = ops::add(&outputs[l], &up)?;
    }
    let eps = ops::add_row(&ops::matmul(&merged, &weights.output_w)?, &weights.output_b)?;
    Ok((
        eps.reshape(&cfg.latent_shape())?,
        ForwardTrace {
            tokens,
            time_emb,
            blocks: traces,
            merged,
        },
    ))
}

/// Parameter gradients of `⟨d_eps, ε̂⟩`.
pub(crate) fn backward(
    weights: &DenoiserWeights,
    trace: &ForwardTrace,
    prompt: &Tensor,
    enh: &[LevelEnhancement<'_>],
    d_eps: &Tensor,
) -> Result<DenoiserWeights> {
    let cfg = &weights.config;
    let mut grads = weights.zeros_like();
    let d_eps = d_eps.clone().reshape(&[cfg.latent_h * cfg.latent_w, cfg.channels])?;
    let (d_merged, d_ow) = ops::matmul_backward(&trace.merged, &weights.output_w, &d_eps)?;
    grads.output_w = d_ow;
    grads.output_b = ops::add_row_backward(&d_eps)?;

    // Skip path: d u_l flows into h_l and, upsampled-backward, into u_{l+1}.
    let mut d_skip = vec![d_merged];
    for l in 0..cfg.levels - 1 {
        let next = ops::upsample_nearest_backward(&d_skip[l], cfg.grid(l + 1), 2)?;
        d_skip.push(next);
    }

    let mut d_pooled: Option<Tensor> = None;
    let mut d_x = None;
    for l in (0..cfg.levels).rev() {
        let mut d_h = d_skip[l].clone();
        if let Some(dp) = d_pooled.take() {
            d_h = ops::add(&d_h, &ops::avg_pool_backward(&dp, cfg.grid(l), 2)?)?;
        }
        let d_in = block_backward(
            &weights.blocks[l],
            &trace.blocks[l],
            prompt,
            enh[l],
            &d_h,
            &mut grads.blocks[l],
        )?;
        if l == 0 {
            d_x = Some(d_in);
        } else {
            d_pooled = Some(d_in);
        }
    }
    let d_x = d_x.expect("level 0 visited");

    let d_temb = ops::add_row_backward(&d_x)?;
    grads.time_b = d_temb.clone();
    let (_, d_tw) = ops::matmul_backward(&trace.time_emb, &weights.time_w, &d_temb.reshape(&[1, cfg.model_dim])?)?;
    grads.time_w = d_tw;
    let (_, d_iw) = ops::matmul_backward(&trace.tokens, &weights.input_w, &d_x)?;
    grads.input_w = d_iw;
    grads.input_b = ops::add_row_backward(&d_x)?;
    Ok(grads)
}
