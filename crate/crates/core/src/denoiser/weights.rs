use serde::{Deserialize, Serialize};

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Shape hyper-parameters of the ε-predictor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_h: usize,
    pub latent_w: usize,
    pub channels: usize,
    pub model_dim: usize,
    pub attn_dim: usize,
    pub mlp_hidden: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    /// Number of resolution levels; level `l` runs at `latent / 2^l`.
    pub levels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_h: 16,
            latent_w: 16,
            channels: 4,
            model_dim: 32,
            attn_dim: 16,
            mlp_hidden: 64,
            text_dim: 32,
            time_dim: 16,
            levels: 2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.latent_h,
            self.latent_w,
            self.channels,
            self.model_dim,
            self.attn_dim,
            self.mlp_hidden,
            self.text_dim,
            self.levels,
        ];
        if dims.contains(&0) {
            return Err(Error::config("denoiser dimensions must be positive"));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::config("time_dim must be positive and even"));
        }
        let div = 1 << (self.levels - 1);
        if !self.latent_h.is_multiple_of(div) || !self.latent_w.is_multiple_of(div) {
            return Err(Error::config(format!(
                "latent {}x{} does not support {} levels",
                self.latent_h, self.latent_w, self.levels
            )));
        }
        Ok(())
    }

    pub fn grid(&self, level: usize) -> (usize, usize) {
        (self.latent_h >> level, self.latent_w >> level)
    }

    /// `(h, w)` of every level, finest first.
    pub fn resolutions(&self) -> Vec<(usize, usize)> {
        (0..self.levels).map(|l| self.grid(l)).collect()
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_h, self.latent_w, self.channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Self-attention, cross-attention and MLP, each with a residual add.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub self_attn: AttentionWeights,
    pub self_out: Tensor,
    pub cross_attn: AttentionWeights,
    pub cross_out: Tensor,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserWeights {
    pub config: DenoiserConfig,
    pub input_w: Tensor,
    pub input_b: Tensor,
    pub time_w: Tensor,
    pub time_b: Tensor,
    pub blocks: Vec<Block>,
    pub output_w: Tensor,
    pub output_b: Tensor,
}

/// Name and shape of every parameter tensor, in serialization order.
pub fn parameter_layout(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let (c, d, dm, hid, dt) = (cfg.channels, cfg.model_dim, cfg.attn_dim, cfg.mlp_hidden, cfg.text_dim);
    let mut layout = vec![
        ("input.w".to_string(), vec![c, d]),
        ("input.b".to_string(), vec![d]),
        ("time.w".to_string(), vec![cfg.time_dim, d]),
        ("time.b".to_string(), vec![d]),
    ];
    for l in 0..cfg.levels {
        let p = |s: &str| format!("level{l}.{s}");
        layout.extend([
            (p("self.q"), vec![d, dm]),
            (p("self.k"), vec![d, dm]),
            (p("self.v"), vec![d, dm]),
            (p("self.out"), vec![dm, d]),
            (p("cross.q"), vec![d, dm]),
            (p("cross.k"), vec![dt, dm]),
            (p("cross.v"), vec![dt, dm]),
            (p("cross.out"), vec![dm, d]),
            (p("mlp.w1"), vec![d, hid]),
            (p("mlp.b1"), vec![hid]),
            (p("mlp.w2"), vec![hid, d]),
            (p("mlp.b2"), vec![d]),
        ]);
    }
    layout.push(("output.w".to_string(), vec![d, c]));
    layout.push(("output.b".to_string(), vec![c]));
    layout
}

impl DenoiserWeights {
    /// Matrices drawn from `U(−1/√fan_in, 1/√fan_in)`; biases start at zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let tensors = parameter_layout(&config)
            .into_iter()
            .map(|(_, shape)| {
                if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let bound = 1.0 / (shape[0] as f32).sqrt();
                    rng.uniform_tensor(&shape, -bound, bound)
                }
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub fn zeros_like(&self) -> Self {
        let tensors = parameter_layout(&self.config)
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(&shape))
            .collect();
        Self::from_tensors(self.config.clone(), tensors).expect("layout is self-consistent")
    }

    /// Rebuilds weights from tensors in [`parameter_layout`] order.
    pub fn from_tensors(config: DenoiserConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if tensors.len() != layout.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != &shape[..] {
                return Err(Error::config(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let (input_w, input_b, time_w, time_b) = (next(), next(), next(), next());
        let blocks = (0..config.levels)
            .map(|_| Block {
                self_attn: AttentionWeights { q: next(), k: next(), v: next() },
                self_out: next(),
                cross_attn: AttentionWeights { q: next(), k: next(), v: next() },
                cross_out: next(),
                mlp: Mlp { w1: next(), b1: next(), w2: next(), b2: next() },
            })
            .collect();
        let (output_w, output_b) = (next(), next());
        Ok(Self {
            config,
            input_w,
            input_b,
            time_w,
            time_b,
            blocks,
            output_w,
            output_b,
        })
    }

    /// All parameters in [`parameter_layout`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.input_w, &self.input_b, &self.time_w, &self.time_b];
        for b in &self.blocks {
            out.extend([
                &b.self_attn.q,
                &b.self_attn.k,
                &b.self_attn.v,
                &b.self_out,
                &b.cross_attn.q,
                &b.cross_attn.k,
                &b.cross_attn.v,
                &b.cross_out,
                &b.mlp.w1,
                &b.mlp.b1,
                &b.mlp.w2,
                &b.mlp.b2,
            ]);
        }
        out.extend([&self.output_w, &self.output_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input_w, &mut self.input_b, &mut self.time_w, &mut self.time_b];
        for b in &mut self.blocks {
            out.extend([
                &mut b.self_attn.q,
                &mut b.self_attn.k,
                &mut b.self_attn.v,
                &mut b.self_out,
                &mut b.cross_attn.q,
                &mut b.cross_attn.k,
                &mut b.cross_attn.v,
                &mut b.cross_out,
                &mut b.mlp.w1,
                &mut b.mlp.b1,
                &mut b.mlp.w2,
                &mut b.mlp.b2,
            ]);
        }
        out.extend([&mut self.output_w, &mut self.output_b]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}
