//! Fast, deterministic invariant checks runnable from the CLI.

use anyhow::{ensure, Result};
use maskdiff::attention::{apply_cae, apply_sae, AnomalyMask, SaeOrientation};
use maskdiff::codec::Codec;
use maskdiff::denoiser::{read_checkpoint, write_checkpoint, CheckpointHeader, DenoiserConfig, DenoiserWeights};
use maskdiff::numerics::gradcheck::GradCheck;
use maskdiff::numerics::{ops, DiffOp, Rng, Tensor};
use maskdiff::pipeline::{blend_step, BlendPolicy, GenConfig, Pipeline};
use maskdiff::schedule::{NoiseSchedule, ScheduleParams, SigmaPolicy};
use maskdiff::text::{TextEncoderConfig, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<String>;

const CHECKS: &[(&str, Check)] = &[
    ("rng-reproducible", rng_reproducible),
    ("schedule-invariants", schedule_invariants),
    ("reverse-recovers-x0", reverse_recovers_x0),
    ("softmax-normalised", softmax_normalised),
    ("cae-example", cae_example),
    ("sae-example", sae_example),
    ("codec-round-trip", codec_round_trip),
    ("blend-degenerate-masks", blend_degenerate),
    ("matmul-gradient", matmul_gradient),
    ("checkpoint-round-trip", checkpoint_round_trip),
    ("pipeline-preserves-outside", pipeline_preserves),
];

pub fn run_selftest() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| match check() {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(e) => CheckResult { name, passed: false, detail: format!("{e:#}") },
        })
        .collect()
}

fn rng_reproducible() -> Result<String> {
    let (mut a, mut b) = (Rng::new(7), Rng::new(7));
    let n = 10_000;
    ensure!((0..n).all(|_| a.normal().to_bits() == b.normal().to_bits()), "streams diverged");
    Ok(format!("{n} normals identical"))
}

fn schedule_invariants() -> Result<String> {
    let s = NoiseSchedule::new(50, SigmaPolicy::Ddpm)?;
    ensure!(s.alpha_bar(0) == 1.0, "alpha_bar(0) != 1");
    for t in 1..=50 {
        ensure!(s.beta(t) > 0.0 && s.beta(t) < 1.0, "beta out of range at {t}");
        ensure!(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar not decreasing at {t}");
    }
    Ok(format!("alpha_bar(50) = {:.6e}", s.alpha_bar(50)))
}

fn reverse_recovers_x0() -> Result<String> {
    let s = NoiseSchedule::new(50, SigmaPolicy::Ddpm)?;
    let mut rng = Rng::new(1);
    let x0 = rng.normal_tensor(&[64]);
    let (x1, eps) = s.forward_diffuse(&x0, 1, &mut rng)?;
    let err = s.reverse_step(&x1, &eps, 1, &mut rng)?.max_abs_diff(&x0)?;
    ensure!(err <= 1e-5, "max error {err:e}");
    Ok("t = 1 within 1e-5".into())
}

fn softmax_normalised() -> Result<String> {
    let s = Rng::new(2).normal_tensor(&[32, 17]).map(|v| 10.0 * v);
    let p = ops::softmax_rows(&s)?;
    for r in 0..32 {
        let sum: f64 = p.row(r).iter().map(|&v| v as f64).sum();
        ensure!((sum - 1.0).abs() <= 1e-6, "row {r} sums to {sum}");
    }
    Ok("32 rows".into())
}

fn cae_example() -> Result<String> {
    let s = Tensor::new(&[1, 2], vec![1.0, 2.0])?;
    let p = ops::softmax_rows(&apply_cae(&s, &[1], 1.5)?)?;
    ensure!((p.data()[0] - 0.18243).abs() <= 1e-4 && (p.data()[1] - 0.81757).abs() <= 1e-4, "{:?}", p.data());
    let z = ops::softmax_rows(&apply_cae(&s, &[0], 1.5)?)?;
    ensure!(z.data().iter().all(|&v| (v - 0.5).abs() <= 1e-7), "masked-out row not uniform");
    Ok(format!("[{:.5}, {:.5}]", p.data()[0], p.data()[1]))
}

fn sae_example() -> Result<String> {
    let s = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])?;
    let e = apply_sae(&s, &[1, 0], 1.1, SaeOrientation::QueryRows)?;
    let expected = [0.0, 0.0, 3.3, 4.4];
    ensure!(
        e.data().iter().zip(expected).all(|(a, b)| (a - b).abs() <= 1e-6),
        "{:?}",
        e.data()
    );
    Ok(format!("{:?}", e.data()))
}

fn codec_round_trip() -> Result<String> {
    let codec = Codec::new(2)?;
    let img = Rng::new(3).uniform_tensor(&[32, 32, 1], 0.0, 1.0);
    ensure!(codec.decode(&codec.encode(&img)?)? == img, "decode(encode(x)) != x");
    Ok("32x32x1 <-> 16x16x4".into())
}

fn blend_degenerate() -> Result<String> {
    let s = NoiseSchedule::new(50, SigmaPolicy::Ddpm)?;
    let mut rng = Rng::new(4);
    let zi = rng.normal_tensor(&[4, 4, 4]);
    let z0 = rng.normal_tensor(&[4, 4, 4]);
    let ones = Tensor::full(&[4, 4, 4], 1.0);
    let zeros = Tensor::zeros(&[4, 4, 4]);
    ensure!(blend_step(&zi, &z0, &s, 10, &ones, &mut rng, BlendPolicy::Matched)? == zi, "full mask");
    ensure!(blend_step(&zi, &z0, &s, 1, &zeros, &mut rng, BlendPolicy::Matched)? == z0, "empty mask");
    Ok("full keeps init, empty restores z0".into())
}

fn matmul_gradient() -> Result<String> {
    let mut rng = Rng::new(5);
    let inputs = [rng.normal_tensor(&[3, 4]), rng.normal_tensor(&[4, 2])];
    let worst = GradCheck::default().check_op(DiffOp::Matmul, &inputs, 6)?;
    ensure!(worst < 1e-3, "relative error {worst:e}");
    Ok("relative error < 1e-3".into())
}

fn small_model() -> Result<DenoiserWeights> {
    let cfg = DenoiserConfig { latent_h: 8, latent_w: 8, model_dim: 16, attn_dim: 8, mlp_hidden: 16, ..Default::default() };
    Ok(DenoiserWeights::init(cfg, 6)?)
}

fn checkpoint_round_trip() -> Result<String> {
    let weights = small_model()?;
    let header = CheckpointHeader {
        tensors: CheckpointHeader::tensors_for(&weights.config),
        model: weights.config.clone(),
        schedule: ScheduleParams::linear(50),
        text: TextEncoderConfig::default(),
        vocab: "vocab.json".into(),
        codec_stride: 2,
        seed: 6,
    };
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &header, &weights)?;
    let (h2, w2) = read_checkpoint(&buf[..])?;
    ensure!(h2 == header && w2 == weights, "checkpoint changed on round trip");
    Ok(format!("{} bytes", buf.len()))
}

fn pipeline_preserves() -> Result<String> {
    let weights = small_model()?;
    let vocab = Vocabulary::new(&["checker"]);
    let p = Pipeline {
        weights: &weights,
        vocab: &vocab,
        text: TextEncoderConfig::default(),
        codec: Codec::new(2)?,
        schedule: ScheduleParams::linear(50),
    };
    let img = Rng::new(7).uniform_tensor(&[16, 16, 1], 0.0, 1.0);
    let mask = AnomalyMask::from_fn(16, 16, |y, x| (4..10).contains(&y) && (2..8).contains(&x));
    let cfg = GenConfig { steps: 5, ..GenConfig::new("checker", 7) };
    let out = p.generate(&img, &mask, &cfg)?;
    let outside = (0..256).filter(|&i| mask.as_slice()[i] == 0);
    let mut n = 0;
    for i in outside {
        ensure!(out.image.data()[i] == img.data()[i], "pixel {i} changed");
        n += 1;
    }
    Ok(format!("{n} outside pixels unchanged"))
}
