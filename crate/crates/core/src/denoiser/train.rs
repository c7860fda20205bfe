use super::{DenoiserWeights, EpsModel};
use crate::error::{Error, Result};
use crate::numerics::{ops, Rng, Tensor};
use crate::schedule::NoiseSchedule;
use crate::text::PromptEmbedding;

/// A clean latent and the embedding of its class prompt.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub latent: Tensor,
    pub prompt: PromptEmbedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 1,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub weights: DenoiserWeights,
    /// Mean batch loss before each update.
    pub losses: Vec<f32>,
}

/// One draw of `‖ε − ε_θ(x_t, P, t)‖²/n` with `t ~ U{1..T}`.
pub fn training_loss<M: EpsModel>(
    model: &M,
    x0: &Tensor,
    sched: &NoiseSchedule,
    prompt: &PromptEmbedding,
    rng: &mut Rng,
) -> Result<f32> {
    let t = 1 + rng.below(sched.steps());
    let (xt, eps) = sched.forward_diffuse(x0, t, rng)?;
    let pred = model.predict(&xt, prompt, sched, t)?;
    Ok(ops::mse(&pred, &eps)?.data()[0])
}

/// SGD with momentum on the denoising objective.
pub fn train(
    mut weights: DenoiserWeights,
    dataset: &[TrainSample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainingRun> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::config("steps and batch size must be at least 1"));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::config("lr must be finite and >= 0, momentum in [0, 1)"));
    }
    if dataset.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut velocity = weights.zeros_like();
    let mut losses = Vec::with_capacity(cfg.steps);
    let inv_batch = 1.0 / cfg.batch_size as f32;

    for step in 0..cfg.steps {
        let mut grad = weights.zeros_like();
        let mut loss = 0.0f32;
        for _ in 0..cfg.batch_size {
            let sample = &dataset[rng.below(dataset.len())];
            let t = 1 + rng.below(sched.steps());
            let (xt, eps) = sched.forward_diffuse(&sample.latent, t, rng)?;
            let (l, g) = weights
                .loss_and_grad(&xt, &sample.prompt, sched, t, &eps)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::TrainingDiverged { step, loss: f32::NAN },
                    other => other,
                })?;
            loss += l * inv_batch;
            for (acc, gi) in grad.tensors_mut().into_iter().zip(g.tensors()) {
                acc.axpy(inv_batch, gi)?;
            }
        }
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        losses.push(loss);

        if let Some(max_norm) = cfg.grad_clip {
            let norm = grad
                .tensors()
                .iter()
                .flat_map(|t| t.data())
                .map(|&g| g as f64 * g as f64)
                .sum::<f64>()
                .sqrt() as f32;
            if norm > max_norm {
                let s = max_norm / norm;
                for t in grad.tensors_mut() {
                    t.data_mut().iter_mut().for_each(|g| *g *= s);
                }
            }
        }
        for ((w, v), g) in weights
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grad.tensors())
        {
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = cfg.momentum * *vi + gi;
                *wi -= cfg.lr * *vi;
            }
        }
        if !weights.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: f32::NAN });
        }
    }
    Ok(TrainingRun { weights, losses })
}
