//! Mask-guided anomaly generation.
//!
//! The normal image is encoded and fully noised, then denoised step by step
//! with the enhanced ε-predictor. After every step, cells outside the mask
//! are overwritten by a freshly noised copy of the original latent, so only
//! the masked region is ever regenerated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{build_pyramid, AnomalyMask, AttentionConfig, SaeOrientation};
use crate::codec::{Codec, LatentImage};
use crate::denoiser::DenoiserWeights;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::schedule::{NoiseSchedule, ScheduleParams, SigmaPolicy};
use crate::text::{encode, PromptTemplate, TextEncoderConfig, Vocabulary};

/// Noise level the original latent is brought to before blending.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlendPolicy {
    /// Level `t − 1`, the level of the freshly denoised latent.
    #[default]
    Matched,
    /// Level `t`, the level of the latent fed to the denoiser.
    InputLevel,
}

impl FromStr for BlendPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched" => Ok(Self::Matched),
            "input-level" => Ok(Self::InputLevel),
            other => Err(Error::config(format!("unknown blend policy `{other}`"))),
        }
    }
}

impl fmt::Display for BlendPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Matched => "matched",
            Self::InputLevel => "input-level",
        })
    }
}

/// Substream ids derived from the master seed.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_REVERSE: u64 = 2;
pub const STREAM_BLEND: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub alpha: f32,
    pub beta: f32,
    pub steps: usize,
    pub seed: u64,
    pub template: PromptTemplate,
    pub class_name: String,
    pub sigma: SigmaPolicy,
    pub blend: BlendPolicy,
    pub sae_orientation: SaeOrientation,
    pub cae: bool,
    pub sae: bool,
    pub enabled_levels: Option<Vec<usize>>,
}

impl GenConfig {
    pub fn new(class_name: impl Into<String>, seed: u64) -> Self {
        Self {
            alpha: 1.5,
            beta: 1.1,
            steps: 50,
            seed,
            template: PromptTemplate::DamagedBroken,
            class_name: class_name.into(),
            sigma: SigmaPolicy::Ddpm,
            blend: BlendPolicy::Matched,
            sae_orientation: SaeOrientation::QueryRows,
            cae: true,
            sae: true,
            enabled_levels: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.class_name.trim().is_empty() {
            return Err(Error::config("class name must be non-empty"));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            alpha: self.alpha,
            beta: self.beta,
            sae_orientation: self.sae_orientation,
            cae: self.cae,
            sae: self.sae,
            enabled_levels: self.enabled_levels.clone(),
        }
    }

    pub fn prompt(&self) -> String {
        self.template.render(&self.class_name)
    }

    fn enhanced(&self) -> bool {
        self.cae || self.sae
    }
}

fn ensure_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::config("blend mask must be binary"));
    }
    Ok(())
}

/// `z_init ⊙ M + noised(z0) ⊙ (1 − M)`.
///
/// `noised(z0)` is `z0` diffused to level `t − 1` (matched) or `t`
/// (input-level). One normal per element is drawn from `rng` either way.
pub fn blend_step(
    z_init: &Tensor,
    z0: &Tensor,
    sched: &NoiseSchedule,
    t: usize,
    mask: &Tensor,
    rng: &mut Rng,
    policy: BlendPolicy,
) -> Result<Tensor> {
    z_init.ensure_same_shape(z0, "blend_step")?;
    z_init.ensure_same_shape(mask, "blend_step_mask")?;
    ensure_binary(mask)?;
    if t == 0 {
        return Err(Error::Timestep {
            t,
            min: 1,
            max: sched.steps(),
        });
    }
    let level = match policy {
        BlendPolicy::Matched => t - 1,
        BlendPolicy::InputLevel => t,
    };
    let (noised, _) = sched.forward_diffuse(z0, level, rng)?;
    let data = z_init
        .data()
        .iter()
        .zip(noised.data())
        .zip(mask.data())
        .map(|((&zi, &zn), &m)| zi * m + zn * (1.0 - m))
        .collect();
    Tensor::new(z_init.shape(), data)
}

/// Output of one generation run.
#[derive(Clone, Debug)]
pub struct Generation {
    /// Decoded image clamped to `[0, 1]`.
    pub image: Tensor,
    /// Final latent `z_0` before decoding.
    pub latent: Tensor,
    /// Pixels whose codec patch touches the mask; only these can change.
    pub effective_mask: AnomalyMask,
}

/// Everything needed to run generation against a trained denoiser.
#[derive(Clone, Debug)]
pub struct Pipeline<'a> {
    pub weights: &'a DenoiserWeights,
    pub vocab: &'a Vocabulary,
    pub text: TextEncoderConfig,
    pub codec: Codec,
    /// Base schedule the denoiser was trained on; `steps` is overridden per run.
    pub schedule: ScheduleParams,
}

impl Pipeline<'_> {
    pub fn schedule_for(&self, cfg: &GenConfig) -> Result<NoiseSchedule> {
        let params = ScheduleParams {
            steps: cfg.steps,
            ..self.schedule.clone()
        };
        NoiseSchedule::from_params(params, cfg.sigma)
    }

    fn check_inputs(&self, img: &Tensor, mask: &AnomalyMask) -> Result<()> {
        let (h, w, c) = match img.shape() {
            &[h, w, c] => (h, w, c),
            other => return Err(Error::shape("generate", other, &[0, 0, 0])),
        };
        let latent = self.codec.latent_dims(h, w, c)?;
        let m = &self.weights.config;
        if latent != (m.latent_h, m.latent_w, m.channels) {
            return Err(Error::config(format!(
                "image {h}x{w}x{c} encodes to latent {latent:?}, checkpoint expects {:?}",
                m.latent_shape()
            )));
        }
        if mask.dims() != (h, w) {
            return Err(Error::shape("generate_mask", &[mask.dims().0, mask.dims().1], &[h, w]));
        }
        img.ensure_finite("generate input")
    }

    pub fn generate(&self, img: &Tensor, mask: &AnomalyMask, cfg: &GenConfig) -> Result<Generation> {
        self.generate_observed(img, mask, cfg, |_, _| {})
    }

    /// Like [`Pipeline::generate`], calling `observer(t, z_{t−1})` after each blend.
    pub fn generate_observed(
        &self,
        img: &Tensor,
        mask: &AnomalyMask,
        cfg: &GenConfig,
        mut observer: impl FnMut(usize, &Tensor),
    ) -> Result<Generation> {
        cfg.validate()?;
        self.check_inputs(img, mask)?;
        let sched = self.schedule_for(cfg)?;
        let steps = sched.steps();
        let model = &self.weights.config;

        let z0 = self.codec.encode(img)?;
        let latent_mask = self.codec.downsample_mask(mask, model.channels)?;
        let pixel_res: Vec<(usize, usize)> = model
            .resolutions()
            .iter()
            .map(|&(h, w)| (h, w))
            .collect();
        // Pool straight from pixels; with an s×s codec this equals pooling the latent mask.
        let pyramid = build_pyramid(mask, &pixel_res)?;
        let pyramid = cfg.enhanced().then_some(&pyramid);
        let attn = cfg.attention();
        let prompt = encode(&cfg.prompt(), self.vocab, &self.text)?;

        let mut rng_init = Rng::substream(cfg.seed, STREAM_INIT);
        let mut rng_reverse = Rng::substream(cfg.seed, STREAM_REVERSE);
        let mut rng_blend = Rng::substream(cfg.seed, STREAM_BLEND);

        let (mut zt, _) = sched.forward_diffuse(&z0.tensor, steps, &mut rng_init)?;
        for t in (1..=steps).rev() {
            let eps = self.weights.predict_eps(&zt, &prompt, &sched, t, &attn, pyramid)?;
            let z_init = sched.reverse_step(&zt, &eps, t, &mut rng_reverse)?;
            zt = blend_step(&z_init, &z0.tensor, &sched, t, &latent_mask, &mut rng_blend, cfg.blend)?;
            observer(t, &zt);
        }

        let decoded = self.codec.decode(&LatentImage {
            tensor: zt.clone(),
            pixel_dims: z0.pixel_dims,
        })?;
        let (h, w) = mask.dims();
        let s = self.codec.stride();
        let effective_mask = mask.max_pool_to(h / s, w / s)?.upsample(s);
        Ok(Generation {
            image: decoded.map(|v| v.clamp(0.0, 1.0)),
            latent: zt,
            effective_mask,
        })
    }
}
