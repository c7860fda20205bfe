//! Trainable ε-predictor: a two-resolution attention network with
//! self-attention, cross-attention over the prompt, and an MLP per level.

mod checkpoint;
mod network;
mod train;
mod weights;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC};
pub use network::timestep_embedding;
pub use train::{train, training_loss, TrainConfig, TrainSample, TrainingRun};
pub use weights::{parameter_layout, Block, DenoiserConfig, DenoiserWeights, Mlp};

use crate::attention::{AttentionConfig, MaskPyramid};
use crate::error::Result;
use crate::numerics::{ops, Tensor};
use crate::schedule::NoiseSchedule;
use crate::text::PromptEmbedding;

/// Anything that predicts the noise in `z_t`.
pub trait EpsModel {
    fn predict(&self, zt: &Tensor, prompt: &PromptEmbedding, sched: &NoiseSchedule, t: usize) -> Result<Tensor>;
}

impl DenoiserWeights {
    /// `ε_θ(z_t, P, t)`. With a pyramid, self-attention logits go through
    /// SAE and cross-attention logits through CAE on enabled levels.
    pub fn predict_eps(
        &self,
        zt: &Tensor,
        prompt: &PromptEmbedding,
        sched: &NoiseSchedule,
        t: usize,
        attn: &AttentionConfig,
        pyramid: Option<&MaskPyramid>,
    ) -> Result<Tensor> {
        check_step(sched, t)?;
        zt.ensure_finite("predict_eps input")?;
        let enh = network::level_enhancements(self, attn, pyramid)?;
        let (eps, _) = network::forward(self, zt, &prompt.matrix, sched.base_timestep(t), &enh)?;
        Ok(eps)
    }

    /// Vanilla-mode MSE against `target` and its parameter gradients.
    pub fn loss_and_grad(
        &self,
        zt: &Tensor,
        prompt: &PromptEmbedding,
        sched: &NoiseSchedule,
        t: usize,
        target: &Tensor,
    ) -> Result<(f32, DenoiserWeights)> {
        check_step(sched, t)?;
        let enh = network::level_enhancements(self, &AttentionConfig::default(), None)?;
        let (pred, trace) = network::forward(self, zt, &prompt.matrix, sched.base_timestep(t), &enh)?;
        let loss = ops::mse(&pred, target)?.data()[0];
        let (d_pred, _) = ops::mse_backward(&pred, target, 1.0)?;
        let grads = network::backward(self, &trace, &prompt.matrix, &enh, &d_pred)?;
        Ok((loss, grads))
    }
}

impl EpsModel for DenoiserWeights {
    fn predict(&self, zt: &Tensor, prompt: &PromptEmbedding, sched: &NoiseSchedule, t: usize) -> Result<Tensor> {
        self.predict_eps(zt, prompt, sched, t, &AttentionConfig::default(), None)
    }
}

fn check_step(sched: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > sched.steps() {
        return Err(crate::error::Error::Timestep {
            t,
            min: 1,
            max: sched.steps(),
        });
    }
    Ok(())
}
