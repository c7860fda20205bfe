//! End-to-end acceptance criteria. Each test prints one
//! `ACCEPTANCE <id> PASS|FAIL <name>: <detail>` line to the real stdout.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use maskdiff::attention::{
    apply_cae, apply_sae, attention_backward, attention_forward, AnomalyMask, AttentionWeights, Enhancement,
    SaeOrientation,
};
use maskdiff::denoiser::{parameter_layout, DenoiserConfig, DenoiserWeights, TrainConfig};
use maskdiff::numerics::gradcheck::{contract, GradCheck};
use maskdiff::numerics::{ops, DiffOp, Rng, Tensor};
use maskdiff::pipeline::GenConfig;
use maskdiff::schedule::{NoiseSchedule, SigmaPolicy};
use maskdiff::text::{encode, TextEncoderConfig, Vocabulary};
use maskdiff_harness::imageio::{quantize, save_image, save_mask};
use maskdiff_harness::masks::{gen_masks, MaskShape, MaskSpec};
use maskdiff_harness::metrics::{in_mask_change, preservation_error};
use maskdiff_harness::model::{train_model, TrainOptions, TrainedModel};
use maskdiff_harness::textures::{gen_textures, TextureClass, TextureSample};

const SIZE: usize = 32;
const STRIDE: usize = 2;
const TRAIN_SEED: u64 = 7;
const TRAIN_PER_CLASS: usize = 16;
const EVAL_SEED: u64 = 1234;
const GENERATIONS: usize = 50;
const STEPS_T: usize = 50;

const C1_QUANT_TOL: f64 = 1.0 / 255.0;
const C1_RUNTIME_S: f64 = 5.0;
const C2_MIN_CHANGE: f64 = 0.05;
const C2_MIN_FRACTION: f64 = 0.9;
const C4_UNIFORM_TOL: f64 = 1e-7;
const C4_ENTROPY_SLACK: f64 = 1e-6;
const C4_ROWS: usize = 1000;
const C4_ALPHAS: [f32; 4] = [0.5, 1.0, 1.5, 2.0];
const C5_SAMPLES: usize = 100_000;
const C5_REL_TOL: f64 = 0.02;
const C6_REL_TOL: f64 = 1e-3;
const C7_MAX_RATIO: f64 = 0.5;
const C7_WINDOW: usize = 100;

/// Criteria run one at a time so timings are not skewed.
static SERIAL: Mutex<()> = Mutex::new(());

struct Trained {
    model: TrainedModel,
    losses: Vec<f32>,
    train_secs: f64,
}

fn train_images() -> Vec<(Tensor, String)> {
    gen_textures(&TextureClass::ALL, TRAIN_PER_CLASS, SIZE, STRIDE, TRAIN_SEED)
        .unwrap()
        .into_iter()
        .map(|s| (s.image, s.class.to_string()))
        .collect()
}

fn train_opts(steps: usize) -> TrainOptions {
    TrainOptions { train: TrainConfig { steps, ..Default::default() }, steps_t: STEPS_T, stride: STRIDE, seed: TRAIN_SEED }
}

fn trained() -> &'static Trained {
    static MODEL: OnceLock<Trained> = OnceLock::new();
    MODEL.get_or_init(|| {
        let start = Instant::now();
        let (model, losses) = train_model(&train_images(), &train_opts(TrainConfig::default().steps)).unwrap();
        Trained { model, losses, train_secs: start.elapsed().as_secs_f64() }
    })
}

fn eval_textures() -> Vec<TextureSample> {
    gen_textures(&TextureClass::ALL, GENERATIONS.div_ceil(TextureClass::ALL.len()), SIZE, STRIDE, EVAL_SEED).unwrap()
}

fn report(id: &str, name: &str, passed: bool, detail: String) {
    let line = format!("ACCEPTANCE {id} {} {name}: {detail}\n", if passed { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(passed, "{}", line.trim_end());
}

fn mixed_masks(count: usize, seed: u64) -> Vec<AnomalyMask> {
    let shapes = [MaskShape::Rect, MaskShape::Ellipse, MaskShape::Blob];
    let per = count.div_ceil(shapes.len());
    let mut all: Vec<Vec<AnomalyMask>> = shapes
        .iter()
        .enumerate()
        .map(|(k, &s)| gen_masks(SIZE, per, &MaskSpec::new(s, 0.05, 0.3), seed + k as u64).unwrap())
        .collect();
    (0..count).map(|i| all[i % shapes.len()].remove(0)).collect()
}

#[test]
fn c1_exact_preservation() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = trained();
    let pipe = t.model.pipeline().unwrap();
    let textures = eval_textures();
    let masks = mixed_masks(GENERATIONS, EVAL_SEED);

    let (mut worst_raw, mut worst_q, mut secs) = (0.0f64, 0.0f64, 0.0f64);
    for (i, mask) in masks.iter().enumerate() {
        let tex = &textures[i % textures.len()];
        let cfg = GenConfig::new(tex.class.name(), i as u64);
        let start = Instant::now();
        let out = pipe.generate(&tex.image, mask, &cfg).unwrap();
        secs += start.elapsed().as_secs_f64();
        worst_raw = worst_raw.max(preservation_error(&out.image, &tex.image, mask).unwrap());
        worst_q = worst_q.max(preservation_error(&quantize(&out.image), &tex.image, mask).unwrap());
    }
    let passed = worst_raw == 0.0 && worst_q <= C1_QUANT_TOL && secs < C1_RUNTIME_S;
    report(
        "C1",
        "exact preservation",
        passed,
        format!(
            "{GENERATIONS} pairs, max error {worst_raw:e} raw / {worst_q:.3e} quantized (tol {C1_QUANT_TOL:.3e}), \
             {secs:.2}s total (limit {C1_RUNTIME_S}s)"
        ),
    );
}

#[test]
fn c2_anomaly_saliency() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = trained();
    let pipe = t.model.pipeline().unwrap();
    let textures = eval_textures();
    let masks = gen_masks(SIZE, GENERATIONS, &MaskSpec::new(MaskShape::Rect, 0.05, 0.3), EVAL_SEED + 10).unwrap();

    let (mut salient, mut worst_outside, mut min_change) = (0usize, 0.0f64, f64::INFINITY);
    for (i, mask) in masks.iter().enumerate() {
        let tex = &textures[i % textures.len()];
        let out = pipe.generate(&tex.image, mask, &GenConfig::new(tex.class.name(), 100 + i as u64)).unwrap();
        let change = in_mask_change(&out.image, &tex.image, mask).unwrap();
        worst_outside = worst_outside.max(preservation_error(&out.image, &tex.image, mask).unwrap());
        min_change = min_change.min(change);
        if change >= C2_MIN_CHANGE {
            salient += 1;
        }
    }
    let fraction = salient as f64 / GENERATIONS as f64;
    report(
        "C2",
        "anomaly saliency",
        fraction >= C2_MIN_FRACTION && worst_outside == 0.0,
        format!(
            "{salient}/{GENERATIONS} with in-mask change >= {C2_MIN_CHANGE} (need {:.0}%), min {min_change:.4}, \
             max outside change {worst_outside:e}",
            100.0 * C2_MIN_FRACTION
        ),
    );
}

#[test]
fn c3a_neutral_full_mask_matches_plain_sampling() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = trained();
    let pipe = t.model.pipeline().unwrap();
    let tex = &eval_textures()[0];
    let full = AnomalyMask::ones(SIZE, SIZE);
    let neutral = GenConfig { alpha: 1.0, beta: 1.0, ..GenConfig::new(tex.class.name(), 3) };
    let plain = GenConfig { cae: false, sae: false, ..neutral.clone() };
    let a = pipe.generate(&tex.image, &full, &neutral).unwrap();
    let b = pipe.generate(&tex.image, &full, &plain).unwrap();
    let identical = a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    report(
        "C3a",
        "alpha=1 beta=1 full mask is bit-identical to the unenhanced path",
        identical,
        format!("max |diff| {:e}", a.image.max_abs_diff(&b.image).unwrap()),
    );
}

#[test]
fn c3b_empty_mask_returns_input() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = trained();
    let pipe = t.model.pipeline().unwrap();
    let mut exact = 0;
    let textures = eval_textures();
    for (i, tex) in textures.iter().take(8).enumerate() {
        let out = pipe.generate(&tex.image, &AnomalyMask::zeros(SIZE, SIZE), &GenConfig::new(tex.class.name(), i as u64)).unwrap();
        if out.image == tex.image {
            exact += 1;
        }
    }
    report("C3b", "empty mask returns the input", exact == 8, format!("{exact}/8 outputs equal their input exactly"));
}

fn entropy(p: &[f32]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -(v as f64) * (v as f64).ln()).sum()
}

fn argmax(v: &[f32]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[test]
fn c4_attention_algebra() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = Rng::new(404);

    let mut worst_uniform = 0.0f64;
    for c in [1usize, 2, 3, 7, 16, 77] {
        let alternate = |n: usize| (0..n).map(|r| (r % 2) as u8).collect::<Vec<u8>>();
        let mut check_zeroed = |p: &Tensor, mask: &[u8], zeroed: u8| {
            for r in (0..mask.len()).filter(|&r| mask[r] == zeroed) {
                for &v in p.row(r) {
                    worst_uniform = worst_uniform.max((v as f64 - 1.0 / c as f64).abs());
                }
            }
        };
        let cross = rng.normal_tensor(&[6, c]).map(|v| 4.0 * v);
        let m = alternate(6);
        check_zeroed(&ops::softmax_rows(&apply_cae(&cross, &m, 1.5).unwrap()).unwrap(), &m, 0);
        let own = rng.normal_tensor(&[c, c]).map(|v| 4.0 * v);
        let m = alternate(c);
        check_zeroed(&ops::softmax_rows(&apply_sae(&own, &m, 1.1, SaeOrientation::QueryRows).unwrap()).unwrap(), &m, 1);
    }

    let (mut entropy_ok, mut argmax_ok) = (0usize, 0usize);
    for _ in 0..C4_ROWS {
        let c = 2 + rng.below(31);
        let s = rng.uniform_tensor(&[1, c], 0.01, 5.0);
        let top = argmax(s.data());
        let probs: Vec<Vec<f32>> = C4_ALPHAS
            .iter()
            .map(|&a| ops::softmax_rows(&apply_cae(&s, &[1], a).unwrap()).unwrap().data().to_vec())
            .collect();
        if probs.windows(2).all(|w| entropy(&w[1]) <= entropy(&w[0]) + C4_ENTROPY_SLACK) {
            entropy_ok += 1;
        }
        if probs.iter().all(|p| argmax(p) == top) {
            argmax_ok += 1;
        }
    }
    report(
        "C4",
        "CAE/SAE algebra",
        worst_uniform <= C4_UNIFORM_TOL && entropy_ok == C4_ROWS && argmax_ok == C4_ROWS,
        format!(
            "zeroed rows max |p - 1/c| {worst_uniform:e}; entropy non-increasing {entropy_ok}/{C4_ROWS}; \
             argmax kept {argmax_ok}/{C4_ROWS}"
        ),
    );
}

#[test]
fn c5_scheduler_statistics() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let sched = NoiseSchedule::new(STEPS_T, SigmaPolicy::Ddpm).unwrap();
    let x0 = 0.7f32;
    let xs = Tensor::full(&[C5_SAMPLES], x0);
    let n = C5_SAMPLES as f64;
    let mut passed = true;
    let mut parts = Vec::new();
    for t in [1, 10, 25, 50] {
        let (xt, _) = sched.forward_diffuse(&xs, t, &mut Rng::new(500 + t as u64)).unwrap();
        let mean = xt.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = xt.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ab = sched.alpha_bar(t);
        let (mu, sigma2) = (ab.sqrt() * x0 as f64, 1.0 - ab);
        let rms = (mu * mu + sigma2).sqrt();
        let mean_err = (mean - mu).abs() / rms;
        let var_err = (var - sigma2).abs() / sigma2;
        passed &= mean_err <= C5_REL_TOL && var_err <= C5_REL_TOL;
        parts.push(format!("t={t} mean err {mean_err:.4} var err {var_err:.4}"));
    }
    report("C5", "scheduler statistics", passed, format!("{C5_SAMPLES} samples; {}", parts.join(", ")));
}

fn attention_error(check: &GradCheck, features: &Tensor, context: &Tensor, w: &AttentionWeights, enh: Enhancement<'_>, self_attn: bool) -> f64 {
    let trace = attention_forward(features, context, w, enh).unwrap();
    let u = Rng::new(9).normal_tensor(trace.out.shape());
    let g = attention_backward(&trace, features, context, w, enh, &u).unwrap();
    let eval = |f: &Tensor, c: &Tensor, w: &AttentionWeights| Ok(contract(&attention_forward(f, c, w, enh)?.out, &u));

    let mut worst = 0.0f64;
    for (k, analytic) in [&g.q, &g.k, &g.v].into_iter().enumerate() {
        let param = [&w.q, &w.k, &w.v][k];
        for i in 0..param.len() {
            let numeric = check
                .derivative(param, i, |p| {
                    let mut w2 = w.clone();
                    *[&mut w2.q, &mut w2.k, &mut w2.v][k] = p.clone();
                    eval(features, context, &w2)
                })
                .unwrap();
            worst = worst.max(check.relative_error(analytic.data()[i] as f64, numeric));
        }
    }
    let d_feat = if self_attn { ops::add(&g.features, &g.context).unwrap() } else { g.features.clone() };
    for i in 0..features.len() {
        let numeric = check
            .derivative(features, i, |f| if self_attn { eval(f, f, w) } else { eval(f, context, w) })
            .unwrap();
        worst = worst.max(check.relative_error(d_feat.data()[i] as f64, numeric));
    }
    if !self_attn {
        for i in 0..context.len() {
            let numeric = check.derivative(context, i, |c| eval(features, c, w)).unwrap();
            worst = worst.max(check.relative_error(g.context.data()[i] as f64, numeric));
        }
    }
    worst
}

fn denoiser_error(check: &GradCheck, cfg: DenoiserConfig, seed: u64) -> f64 {
    let weights = DenoiserWeights::init(cfg.clone(), seed).unwrap();
    let sched = NoiseSchedule::new(STEPS_T, SigmaPolicy::Ddpm).unwrap();
    let vocab = Vocabulary::new(&["checker"]);
    let text = TextEncoderConfig { dim: cfg.text_dim, ..Default::default() };
    let prompt = encode("a checker with a scratch", &vocab, &text).unwrap();
    let mut rng = Rng::new(seed + 1);
    let zt = rng.normal_tensor(&cfg.latent_shape());
    let target = rng.normal_tensor(&cfg.latent_shape());
    let t = 1 + rng.below(STEPS_T);
    let (_, grads) = weights.loss_and_grad(&zt, &prompt, &sched, t, &target).unwrap();
    let loss = |w: &DenoiserWeights| -> maskdiff::error::Result<f64> {
        let pred = w.predict_eps(&zt, &prompt, &sched, t, &Default::default(), None)?;
        let sq: f64 = pred.data().iter().zip(target.data()).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
        Ok(sq / pred.len() as f64)
    };
    let mut worst = 0.0f64;
    for k in 0..parameter_layout(&cfg).len() {
        for _ in 0..3 {
            let i = rng.below(weights.tensors()[k].len());
            let numeric = check
                .derivative(weights.tensors()[k], i, |p| {
                    let mut w2 = weights.clone();
                    *w2.tensors_mut()[k] = p.clone();
                    loss(&w2)
                })
                .unwrap();
            worst = worst.max(check.relative_error(grads.tensors()[k].data()[i] as f64, numeric));
        }
    }
    worst
}

#[test]
fn c6_gradient_integrity() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let check = GradCheck::default();
    let mut rng = Rng::new(606);
    let mut n = |shape: &[usize], scale: f32| rng.normal_tensor(shape).map(|v| scale * v);
    let cases: Vec<(DiffOp, Vec<Tensor>)> = vec![
        (DiffOp::Matmul, vec![n(&[3, 4], 1.0), n(&[4, 5], 1.0)]),
        (DiffOp::MatmulNt, vec![n(&[3, 4], 1.0), n(&[5, 4], 1.0)]),
        (DiffOp::SoftmaxRows, vec![n(&[4, 6], 2.0)]),
        (DiffOp::Add, vec![n(&[3, 3], 1.0), n(&[3, 3], 1.0)]),
        (DiffOp::Mul, vec![n(&[3, 3], 1.0), n(&[3, 3], 1.0)]),
        (DiffOp::AddRow, vec![n(&[4, 3], 1.0), n(&[3], 1.0)]),
        (DiffOp::Silu, vec![n(&[4, 4], 3.0)]),
        (DiffOp::Mse, vec![n(&[2, 5], 1.0), n(&[2, 5], 1.0)]),
        (DiffOp::AvgPool { grid: (4, 4), factor: 2 }, vec![n(&[16, 3], 1.0)]),
        (DiffOp::UpsampleNearest { grid: (2, 2), factor: 2 }, vec![n(&[4, 3], 1.0)]),
    ];
    let mut errors: Vec<(String, f64)> = cases
        .into_iter()
        .enumerate()
        .map(|(k, (op, inputs))| (op.to_string(), check.check_op(op, &inputs, 700 + k as u64).unwrap()))
        .collect();

    let features = n(&[4, 6], 1.0);
    let context = n(&[3, 5], 1.0);
    let w_self = AttentionWeights { q: n(&[6, 4], 0.5), k: n(&[6, 4], 0.5), v: n(&[6, 4], 0.5) };
    let w_cross = AttentionWeights { q: n(&[6, 4], 0.5), k: n(&[5, 4], 0.5), v: n(&[5, 4], 0.5) };
    let mask = [1u8, 0, 1, 0];
    errors.push(("self-attention".into(), attention_error(&check, &features, &features, &w_self, Enhancement::None, true)));
    for orientation in [SaeOrientation::QueryRows, SaeOrientation::KeyColumns] {
        let enh = Enhancement::SelfAttn { mask: &mask, beta: 1.1, orientation };
        errors.push((format!("sae-{orientation}"), attention_error(&check, &features, &features, &w_self, enh, true)));
    }
    errors.push(("cross-attention".into(), attention_error(&check, &features, &context, &w_cross, Enhancement::None, false)));
    let enh = Enhancement::Cross { mask: &mask, alpha: 1.5 };
    errors.push(("cae".into(), attention_error(&check, &features, &context, &w_cross, enh, false)));

    let tiny = DenoiserConfig {
        latent_h: 4,
        latent_w: 4,
        channels: 2,
        model_dim: 8,
        attn_dim: 4,
        mlp_hidden: 8,
        text_dim: 8,
        time_dim: 4,
        levels: 2,
    };
    errors.push(("denoiser".into(), denoiser_error(&check, tiny, 31)));

    let (name, worst) = errors.iter().fold((String::new(), 0.0f64), |acc, (n, e)| if *e > acc.1 { (n.clone(), *e) } else { acc });
    report(
        "C6",
        "gradient integrity",
        worst < C6_REL_TOL,
        format!("{} checks, worst relative error {worst:.2e} ({name}), limit {C6_REL_TOL:e}", errors.len()),
    );
}

fn window_mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

#[test]
fn c7_training_progress() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = trained();
    let first = window_mean(&t.losses[..C7_WINDOW]);
    let last = window_mean(&t.losses[t.losses.len() - C7_WINDOW..]);
    let ratio = last / first;
    let replay_steps = 200;
    let (_, replay) = train_model(&train_images(), &train_opts(replay_steps)).unwrap();
    let deterministic = replay.iter().zip(&t.losses).all(|(a, b)| a.to_bits() == b.to_bits());
    report(
        "C7",
        "training progress",
        ratio <= C7_MAX_RATIO && deterministic,
        format!(
            "{} steps in {:.1}s, loss {first:.4} -> {last:.4} (ratio {ratio:.3}, limit {C7_MAX_RATIO}); \
             independent {replay_steps}-step replay {}",
            t.losses.len(),
            t.train_secs,
            if deterministic { "bit-identical" } else { "differs" }
        ),
    );
}

fn maskdiff(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_maskdiff"))
        .current_dir(dir)
        .env_remove("MASKDIFF_SEED")
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "maskdiff {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn generate_in(dir: &Path, model: &TrainedModel, image: &Tensor, mask: &AnomalyMask) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    fs::create_dir_all(dir.join("model")).unwrap();
    model.save(&dir.join("model/toy.ckpt")).unwrap();
    save_image(&dir.join("input.png"), image).unwrap();
    save_mask(&dir.join("mask.png"), mask).unwrap();
    maskdiff(
        dir,
        &[
            "generate", "--image", "input.png", "--mask", "mask.png", "--class", "checker", "--checkpoint",
            "model/toy.ckpt", "--out", "out.png", "--report", "report.json", "--samples", "2", "--seed", "21",
        ],
    );
    (
        fs::read(dir.join("out_000.png")).unwrap(),
        fs::read(dir.join("out_001.png")).unwrap(),
        fs::read(dir.join("report.json")).unwrap(),
    )
}

#[test]
fn c8_end_to_end_determinism() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();

    let s1 = maskdiff(&a, &["selftest"]).stdout;
    let s2 = maskdiff(&b, &["selftest"]).stdout;
    let selftest_same = s1 == s2 && !s1.is_empty();

    let tex = eval_textures().into_iter().find(|s| s.class == TextureClass::Checker).unwrap();
    let mask = gen_masks(SIZE, 1, &MaskSpec::new(MaskShape::Ellipse, 0.1, 0.2), 88).unwrap().remove(0);
    let ra = generate_in(&a, &t.model, &tex.image, &mask);
    let rb = generate_in(&b, &t.model, &tex.image, &mask);
    let generate_same = ra == rb;
    report(
        "C8",
        "end-to-end determinism",
        selftest_same && generate_same,
        format!(
            "selftest stdout {} ({} bytes); generate outputs {} (2 PNGs + report, {} bytes)",
            if selftest_same { "identical" } else { "differs" },
            s1.len(),
            if generate_same { "identical" } else { "differ" },
            ra.0.len() + ra.1.len() + ra.2.len()
        ),
    );
}
