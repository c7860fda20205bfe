//! Training a toy denoiser on texture images and storing it on disk.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use maskdiff::codec::Codec;
use maskdiff::denoiser::{
    read_checkpoint, train, write_checkpoint, CheckpointHeader, DenoiserConfig, DenoiserWeights, TrainConfig,
    TrainSample,
};
use maskdiff::numerics::{Rng, Tensor};
use maskdiff::pipeline::Pipeline;
use maskdiff::schedule::{NoiseSchedule, ScheduleParams, SigmaPolicy};
use maskdiff::text::{encode, render_prompt, TextEncoderConfig, Vocabulary};

pub const VOCAB_FILE: &str = "vocab.json";

const STREAM_TRAIN: u64 = 11;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub train: TrainConfig,
    pub steps_t: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { train: TrainConfig::default(), steps_t: 50, stride: 2, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub header: CheckpointHeader,
    pub weights: DenoiserWeights,
    pub vocab: Vocabulary,
}

impl TrainedModel {
    pub fn pipeline(&self) -> Result<Pipeline<'_>> {
        Ok(Pipeline {
            weights: &self.weights,
            vocab: &self.vocab,
            text: self.header.text.clone(),
            codec: Codec::new(self.header.codec_stride)?,
            schedule: self.header.schedule.clone(),
        })
    }

    /// Writes the checkpoint and its vocabulary next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_checkpoint(BufWriter::new(file), &self.header, &self.weights)?;
        let vocab = serde_json::to_string_pretty(&self.vocab)? + "\n";
        fs::write(vocab_path(path, &self.header), vocab)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
        let (header, weights) =
            read_checkpoint(BufReader::new(file)).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let vp = vocab_path(path, &header);
        let vocab: Vocabulary = serde_json::from_str(
            &fs::read_to_string(&vp).with_context(|| format!("reading vocabulary {}", vp.display()))?,
        )?;
        vocab.validate()?;
        Ok(Self { header, weights, vocab })
    }
}

fn vocab_path(checkpoint: &Path, header: &CheckpointHeader) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(&header.vocab)
}

/// Trains on `(image, class)` pairs, all of the same size.
pub fn train_model(images: &[(Tensor, String)], opts: &TrainOptions) -> Result<(TrainedModel, Vec<f32>)> {
    let Some((first, _)) = images.first() else {
        anyhow::bail!("no training images");
    };
    let codec = Codec::new(opts.stride)?;
    let (lh, lw, ch) = match first.shape() {
        &[h, w, c] => codec.latent_dims(h, w, c)?,
        other => anyhow::bail!("expected [h, w, c] images, got {other:?}"),
    };
    let mut classes: Vec<&str> = images.iter().map(|(_, c)| c.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let vocab = Vocabulary::new(&classes);
    let text = TextEncoderConfig::default();
    let model = DenoiserConfig {
        latent_h: lh,
        latent_w: lw,
        channels: ch,
        text_dim: text.dim,
        ..DenoiserConfig::default()
    };
    let set = images
        .iter()
        .map(|(img, class)| {
            Ok(TrainSample {
                latent: codec.encode(img)?.tensor,
                prompt: encode(&render_prompt(class), &vocab, &text)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let schedule = ScheduleParams::linear(opts.steps_t);
    let sched = NoiseSchedule::from_params(schedule.clone(), SigmaPolicy::Ddpm)?;
    let init = DenoiserWeights::init(model.clone(), opts.seed)?;
    let run = train(init, &set, &sched, &opts.train, &mut Rng::substream(opts.seed, STREAM_TRAIN))?;
    let header = CheckpointHeader {
        tensors: CheckpointHeader::tensors_for(&model),
        model,
        schedule,
        text,
        vocab: VOCAB_FILE.into(),
        codec_stride: opts.stride,
        seed: opts.seed,
    };
    Ok((TrainedModel { header, weights: run.weights, vocab }, run.losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textures::{gen_textures, TextureClass};

    #[test]
    fn save_load_round_trip() {
        let imgs: Vec<_> = gen_textures(&[TextureClass::Checker], 2, 16, 2, 0)
            .unwrap()
            .into_iter()
            .map(|s| (s.image, s.class.to_string()))
            .collect();
        let opts = TrainOptions { train: TrainConfig { steps: 3, ..Default::default() }, ..Default::default() };
        let (model, losses) = train_model(&imgs, &opts).unwrap();
        assert_eq!(losses.len(), 3);
        assert_eq!(model.weights.config.latent_shape(), [8, 8, 4]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        model.save(&p).unwrap();
        assert!(dir.path().join(VOCAB_FILE).is_file());
        let back = TrainedModel::load(&p).unwrap();
        assert_eq!(back.weights, model.weights);
        assert_eq!(back.vocab, model.vocab);
        assert_eq!(back.header, model.header);
    }
}
