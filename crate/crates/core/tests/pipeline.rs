use maskdiff::attention::AnomalyMask;
use maskdiff::codec::{Codec, LatentImage};
use maskdiff::denoiser::{DenoiserConfig, DenoiserWeights};
use maskdiff::numerics::{Rng, Tensor};
use maskdiff::pipeline::{blend_step, BlendPolicy, GenConfig, Pipeline};
use maskdiff::schedule::{NoiseSchedule, ScheduleParams, SigmaPolicy};
use maskdiff::text::{TextEncoderConfig, Vocabulary};
use maskdiff::Error;
use proptest::prelude::*;

struct Fixture {
    weights: DenoiserWeights,
    vocab: Vocabulary,
}

impl Fixture {
    fn new() -> Self {
        Self {
            weights: DenoiserWeights::init(DenoiserConfig::default(), 12).unwrap(),
            vocab: Vocabulary::new(&["checker"]),
        }
    }

    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            weights: &self.weights,
            vocab: &self.vocab,
            text: TextEncoderConfig::default(),
            codec: Codec::new(2).unwrap(),
            schedule: ScheduleParams::linear(50),
        }
    }
}

fn image(seed: u64) -> Tensor {
    Rng::new(seed).uniform_tensor(&[32, 32, 1], 0.0, 1.0)
}

fn rect(y0: usize, y1: usize, x0: usize, x1: usize) -> AnomalyMask {
    AnomalyMask::from_fn(32, 32, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x))
}

fn cfg(seed: u64) -> GenConfig {
    GenConfig { steps: 12, ..GenConfig::new("checker", seed) }
}

#[test]
fn out_of_mask_content_is_preserved_exactly() {
    let fx = Fixture::new();
    let p = fx.pipeline();
    let img = image(1);
    let mask = rect(6, 18, 10, 24);
    let out = p.generate(&img, &mask, &cfg(3)).unwrap();
    assert_eq!(out.effective_mask, mask);

    let z0 = p.codec.encode(&img).unwrap().tensor;
    let lm = p.codec.downsample_mask(&mask, 4).unwrap();
    for i in 0..z0.len() {
        if lm.data()[i] == 0.0 {
            assert_eq!(out.latent.data()[i], z0.data()[i]);
        }
    }
    let mut changed = 0;
    for y in 0..32 {
        for x in 0..32 {
            let (a, b) = (img.data()[y * 32 + x], out.image.data()[y * 32 + x]);
            if mask.get(y, x) {
                changed += usize::from(a != b);
            } else {
                assert_eq!(a, b, "pixel ({y},{x})");
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn unaligned_masks_grow_to_codec_patches() {
    let fx = Fixture::new();
    let p = fx.pipeline();
    let img = image(2);
    let mask = rect(5, 8, 5, 8);
    let out = p.generate(&img, &mask, &cfg(0)).unwrap();
    assert_eq!(out.effective_mask, rect(4, 8, 4, 8));
    assert!(mask.is_subset_of(&out.effective_mask));
    for y in 0..32 {
        for x in 0..32 {
            if !out.effective_mask.get(y, x) {
                assert_eq!(img.data()[y * 32 + x], out.image.data()[y * 32 + x]);
            }
        }
    }
}

#[test]
fn empty_mask_returns_the_input() {
    let fx = Fixture::new();
    let img = image(4);
    for sigma in [SigmaPolicy::Ddpm, SigmaPolicy::Zero] {
        let c = GenConfig { sigma, ..cfg(7) };
        let out = fx.pipeline().generate(&img, &AnomalyMask::zeros(32, 32), &c).unwrap();
        assert_eq!(out.image, img);
    }
}

#[test]
fn generation_is_deterministic() {
    let fx = Fixture::new();
    let img = image(5);
    let mask = rect(0, 16, 0, 32);
    let a = fx.pipeline().generate(&img, &mask, &cfg(11)).unwrap();
    let b = fx.pipeline().generate(&img, &mask, &cfg(11)).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.latent, b.latent);
    let c = fx.pipeline().generate(&img, &mask, &cfg(12)).unwrap();
    assert_ne!(a.image, c.image);
}

#[test]
fn growing_the_mask_never_touches_cells_outside_it() {
    let fx = Fixture::new();
    let p = fx.pipeline();
    let img = image(6);
    let small = rect(8, 12, 8, 12);
    let large = rect(4, 20, 6, 26);
    let lm = p.codec.downsample_mask(&large, 4).unwrap();
    let trace = |m: &AnomalyMask| {
        let mut steps = Vec::new();
        p.generate_observed(&img, m, &cfg(9), |t, z| steps.push((t, z.clone()))).unwrap();
        steps
    };
    let (a, b) = (trace(&small), trace(&large));
    assert_eq!(a.len(), 12);
    for ((ta, za), (tb, zb)) in a.iter().zip(&b) {
        assert_eq!(ta, tb);
        for i in 0..za.len() {
            if lm.data()[i] == 0.0 {
                assert_eq!(za.data()[i], zb.data()[i], "t={ta} cell {i}");
            }
        }
    }
}

#[test]
fn steps_count_down_from_t() {
    let fx = Fixture::new();
    let mut seen = Vec::new();
    fx.pipeline()
        .generate_observed(&image(0), &rect(0, 4, 0, 4), &cfg(0), |t, _| seen.push(t))
        .unwrap();
    assert_eq!(seen, (1..=12).rev().collect::<Vec<_>>());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let fx = Fixture::new();
    let p = fx.pipeline();
    let small = Tensor::zeros(&[16, 16, 1]);
    assert!(matches!(p.generate(&small, &AnomalyMask::zeros(16, 16), &cfg(0)), Err(Error::Config(_))));
    assert!(p.generate(&image(0), &AnomalyMask::zeros(16, 16), &cfg(0)).is_err());
    let bad = GenConfig { beta: 0.0, ..cfg(0) };
    assert!(matches!(p.generate(&image(0), &AnomalyMask::zeros(32, 32), &bad), Err(Error::Config(_))));
    let too_long = GenConfig { steps: 2000, ..cfg(0) };
    assert!(p.generate(&image(0), &AnomalyMask::zeros(32, 32), &too_long).is_err());
}

#[test]
fn blend_matches_elementwise_oracle() {
    let sched = NoiseSchedule::new(50, SigmaPolicy::Ddpm).unwrap();
    let z_init = Tensor::new(&[2, 2, 1], vec![0.3, -1.2, 0.8, 2.0]).unwrap();
    let z0 = Tensor::new(&[2, 2, 1], vec![0.1, 0.9, -0.4, 0.5]).unwrap();
    let m = Tensor::new(&[2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    for (policy, level) in [(BlendPolicy::Matched, 19), (BlendPolicy::InputLevel, 20)] {
        let out = blend_step(&z_init, &z0, &sched, 20, &m, &mut Rng::new(31), policy).unwrap();
        let eps = Rng::new(31).normal_tensor(&[2, 2, 1]);
        let ab = sched.alpha_bar(level);
        for i in 0..4 {
            let expected = if m.data()[i] == 1.0 {
                z_init.data()[i] as f64
            } else {
                z0.data()[i] as f64 * ab.sqrt() + eps.data()[i] as f64 * (1.0 - ab).sqrt()
            };
            assert!((out.data()[i] as f64 - expected).abs() <= 1e-6, "{policy} cell {i}");
        }
    }
}

#[test]
fn blending_a_latent_with_itself_at_t1_is_idempotent() {
    let sched = NoiseSchedule::new(50, SigmaPolicy::Zero).unwrap();
    let z = Rng::new(2).normal_tensor(&[4, 4, 4]);
    let m = Tensor::from_fn(&[4, 4, 4], |i| (i % 3 == 0) as u8 as f32);
    let out = blend_step(&z, &z, &sched, 1, &m, &mut Rng::new(0), BlendPolicy::Matched).unwrap();
    assert_eq!(out, z);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn codec_round_trips_random_images(seed in any::<u64>(), c in 1usize..4, stride in 1usize..4) {
        let codec = Codec::new(stride).unwrap();
        let (h, w) = (stride * 5, stride * 3);
        let img = Rng::new(seed).uniform_tensor(&[h, w, c], 0.0, 1.0);
        let lat = codec.encode(&img).unwrap();
        prop_assert_eq!(lat.tensor.shape(), &[5, 3, c * stride * stride]);
        prop_assert_eq!(codec.decode(&lat).unwrap(), img);
    }

    #[test]
    fn latent_mask_marks_exactly_the_touched_patches(bits in prop::collection::vec(any::<bool>(), 64)) {
        let codec = Codec::new(2).unwrap();
        let mask = AnomalyMask::from_fn(8, 8, |y, x| bits[y * 8 + x]);
        let lm = codec.downsample_mask(&mask, 4).unwrap();
        let decoded = codec
            .decode(&LatentImage { tensor: lm.clone(), pixel_dims: (8, 8, 1) })
            .unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let patch = (0..2).any(|dy| (0..2).any(|dx| bits[(y / 2 * 2 + dy) * 8 + x / 2 * 2 + dx]));
                prop_assert_eq!(decoded.data()[y * 8 + x] == 1.0, patch);
            }
        }
    }
}
