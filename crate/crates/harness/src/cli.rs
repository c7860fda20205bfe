//! The `maskdiff` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use maskdiff::attention::{AnomalyMask, SaeOrientation};
use maskdiff::denoiser::TrainConfig;
use maskdiff::numerics::Tensor;
use maskdiff::pipeline::{BlendPolicy, GenConfig, Generation, Pipeline};
use maskdiff::schedule::SigmaPolicy;
use maskdiff::text::PromptTemplate;
use serde::Serialize;

use crate::artifacts::{
    read_json, to_json, write_json, DatasetManifest, GenerationRecord, GenerationReport, GeneratorParams, MaskIndex,
    MaskRecord, SampleRecord, Split, PROXY_NOTE,
};
use crate::imageio::{load_image, load_mask, quantize, save_image, save_mask};
use crate::masks::{gen_masks, MaskShape, MaskSpec};
use crate::metrics::{diversity_score, in_mask_change, mask_patch, preservation_error};
use crate::model::{train_model, TrainOptions, TrainedModel};
use crate::selftest::run_selftest;
use crate::textures::{gen_textures, TextureClass};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MASK_INDEX_FILE: &str = "masks.json";

#[derive(Debug, Parser)]
#[command(name = "maskdiff", version, about = "Mask-guided anomaly synthesis on a toy latent diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write procedural texture images and a dataset manifest.
    GenData(GenDataArgs),
    /// Write procedural binary mask PNGs.
    GenMasks(GenMasksArgs),
    /// Train the toy denoiser on a generated dataset.
    Train(TrainArgs),
    /// Synthesize anomalies inside a mask on a normal image.
    Generate(GenerateArgs),
    /// Recompute metrics for a generation report.
    Evaluate(EvaluateArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Images per class.
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    #[arg(long, value_delimiter = ',', default_values_t = TextureClass::ALL)]
    pub classes: Vec<TextureClass>,
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
    #[arg(long, env = "MASKDIFF_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenMasksArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = MaskShape::Rect)]
    pub shape: MaskShape,
    #[arg(long, default_value_t = 0.05)]
    pub min_area: f64,
    #[arg(long, default_value_t = 0.25)]
    pub max_area: f64,
    /// Masks are drawn on cells of this many pixels; match the codec stride.
    #[arg(long, default_value_t = 2)]
    pub align: usize,
    #[arg(long, env = "MASKDIFF_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding `manifest.json`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; `vocab.json` is written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f32,
    /// Diffusion steps of the training schedule.
    #[arg(long, default_value_t = 50)]
    pub timesteps: usize,
    /// Optional JSON file receiving the per-step loss trace.
    #[arg(long)]
    pub loss_trace: Option<PathBuf>,
    #[arg(long, env = "MASKDIFF_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long = "class")]
    pub class_name: String,
    #[arg(long, default_value_t = 1.5)]
    pub alpha: f32,
    #[arg(long, default_value_t = 1.1)]
    pub beta: f32,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, env = "MASKDIFF_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SigmaPolicy::Ddpm)]
    pub sigma: SigmaPolicy,
    #[arg(long, default_value_t = BlendPolicy::Matched)]
    pub blend: BlendPolicy,
    #[arg(long, default_value = "rows")]
    pub sae_orientation: SaeOrientation,
    #[arg(long, default_value = "damaged-broken")]
    pub template: PromptTemplate,
    #[arg(long)]
    pub no_cae: bool,
    #[arg(long)]
    pub no_sae: bool,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Number of outputs; sample k uses seed + k.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Worker threads for independent samples.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Record wall-clock time per sample (makes reports non-reproducible).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// Fail when any quantized preservation error exceeds this.
    #[arg(long)]
    pub max_preservation: Option<f64>,
}

/// A failure with a process exit code and a stable machine-readable kind.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        Self { code, kind, message: message.into() }
    }

    /// One JSON object on one line.
    pub fn line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            message: &'a str,
            code: u8,
        }
        serde_json::to_string(&Line { error: self.kind, message: &self.message, code: self.code })
            .expect("plain strings serialize")
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        let kind = match e.downcast_ref::<maskdiff::Error>() {
            Some(maskdiff::Error::Config(_) | maskdiff::Error::Resolution { .. }) => "config",
            Some(maskdiff::Error::TrainingDiverged { .. }) => "training-diverged",
            Some(maskdiff::Error::Checkpoint(_)) => "checkpoint-invalid",
            _ => "failed",
        };
        Self::new(1, kind, format!("{e:#}"))
    }
}

fn require_file(path: &Path, kind: &'static str, what: &str) -> std::result::Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::new(2, kind, format!("{what} not found: {}", path.display())))
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code)
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(&a, out).map_err(Into::into),
        Command::GenMasks(a) => gen_masks_cmd(&a, out).map_err(Into::into),
        Command::Train(a) => {
            require_file(&a.data.join(MANIFEST_FILE), "manifest-not-found", "dataset manifest")?;
            train_cmd(&a, out).map_err(Into::into)
        }
        Command::Generate(a) => {
            require_file(&a.checkpoint, "checkpoint-not-found", "checkpoint")?;
            require_file(&a.image, "input-not-found", "image")?;
            require_file(&a.mask, "input-not-found", "mask")?;
            generate_cmd(&a, out).map_err(Into::into)
        }
        Command::Evaluate(a) => {
            require_file(&a.report, "report-not-found", "report")?;
            evaluate_cmd(&a, out)
        }
        Command::Selftest => selftest_cmd(out),
    }
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    if !(0.0..=1.0).contains(&a.test_fraction) {
        anyhow::bail!("test fraction must lie in [0, 1]");
    }
    let samples = gen_textures(&a.classes, a.count, a.size, a.stride, a.seed)?;
    fs::create_dir_all(&a.out)?;
    if !samples.is_empty() {
        fs::create_dir_all(a.out.join("images"))?;
    }
    let n_test = (a.count as f64 * a.test_fraction).round() as usize;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let idx = i % a.count.max(1);
        let rel = format!("images/{}_{idx:03}.png", s.class);
        save_image(&a.out.join(&rel), &s.image)?;
        let split = if idx >= a.count - n_test { Split::Test } else { Split::Train };
        records.push(SampleRecord { image: rel, class: s.class.to_string(), split });
    }
    let manifest = DatasetManifest {
        dataset_id: format!("toy-textures-{}", a.seed),
        seed: a.seed,
        classes: a.classes.iter().map(|c| c.to_string()).collect(),
        generator: GeneratorParams {
            size: a.size,
            count_per_class: a.count,
            codec_stride: a.stride,
            test_fraction: a.test_fraction,
        },
        samples: records,
    };
    write_json(&a.out.join(MANIFEST_FILE), &manifest)?;
    writeln!(out, "wrote {} images to {}", manifest.samples.len(), a.out.display())?;
    Ok(())
}

fn gen_masks_cmd(a: &GenMasksArgs, out: &mut dyn Write) -> Result<()> {
    let spec = MaskSpec { shape: a.shape, min_area: a.min_area, max_area: a.max_area, align: a.align };
    let masks = gen_masks(a.size, a.count, &spec, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut records = Vec::with_capacity(masks.len());
    for (i, m) in masks.iter().enumerate() {
        let rel = format!("mask_{i:03}.png");
        save_mask(&a.out.join(&rel), m)?;
        records.push(MaskRecord { mask: rel, area_fraction: m.area_fraction() });
    }
    write_json(
        &a.out.join(MASK_INDEX_FILE),
        &MaskIndex { seed: a.seed, size: a.size, spec, masks: records },
    )?;
    writeln!(out, "wrote {} masks to {}", masks.len(), a.out.display())?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    samples: usize,
    first_100_mean_loss: f64,
    last_100_mean_loss: f64,
    checkpoint: String,
}

fn window_mean(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| v as f64).sum::<f64>() / xs.len().max(1) as f64
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let manifest: DatasetManifest = read_json(&a.data.join(MANIFEST_FILE))?;
    manifest.verify(&a.data)?;
    let images = manifest
        .samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| Ok((load_image(&a.data.join(&s.image))?, s.class.clone())))
        .collect::<Result<Vec<_>>>()?;
    let opts = TrainOptions {
        train: TrainConfig {
            steps: a.steps,
            lr: a.lr,
            momentum: a.momentum,
            batch_size: a.batch_size,
            grad_clip: (a.grad_clip > 0.0).then_some(a.grad_clip),
        },
        steps_t: a.timesteps,
        stride: manifest.generator.codec_stride,
        seed: a.seed,
    };
    let (model, losses) = train_model(&images, &opts)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    model.save(&a.out)?;
    if let Some(path) = &a.loss_trace {
        write_json(path, &losses)?;
    }
    let k = 100.min(losses.len());
    let summary = TrainSummary {
        steps: losses.len(),
        samples: images.len(),
        first_100_mean_loss: window_mean(&losses[..k]),
        last_100_mean_loss: window_mean(&losses[losses.len() - k..]),
        checkpoint: a.out.display().to_string(),
    };
    write!(out, "{}", to_json(&summary)?)?;
    Ok(())
}

fn sample_path(out: &Path, k: usize, samples: usize) -> PathBuf {
    if samples == 1 {
        return out.to_path_buf();
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("png");
    out.with_file_name(format!("{stem}_{k:03}.{ext}"))
}

fn run_samples(
    pipeline: &Pipeline<'_>,
    img: &Tensor,
    mask: &AnomalyMask,
    configs: &[GenConfig],
    jobs: usize,
) -> Result<Vec<(Generation, f64)>> {
    let one = |cfg: &GenConfig| -> Result<(Generation, f64)> {
        let start = Instant::now();
        let g = pipeline.generate(img, mask, cfg)?;
        Ok((g, start.elapsed().as_secs_f64() * 1e3))
    };
    if jobs <= 1 || configs.len() <= 1 {
        return configs.iter().map(one).collect();
    }
    let chunk = configs.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut all = Vec::with_capacity(configs.len());
        for h in handles {
            all.extend(h.join().expect("generation worker panicked")?);
        }
        Ok(all)
    })
}

fn generate_cmd(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    if a.samples == 0 {
        return Err(maskdiff::Error::Config("--samples must be at least 1".into()).into());
    }
    let model = TrainedModel::load(&a.checkpoint)?;
    let pipeline = model.pipeline()?;
    let img = load_image(&a.image)?;
    let mask = load_mask(&a.mask)?;
    let base = GenConfig {
        alpha: a.alpha,
        beta: a.beta,
        steps: a.steps,
        seed: a.seed,
        template: a.template,
        class_name: a.class_name.clone(),
        sigma: a.sigma,
        blend: a.blend,
        sae_orientation: a.sae_orientation,
        cae: !a.no_cae,
        sae: !a.no_sae,
        enabled_levels: None,
    };
    base.validate()?;
    let configs: Vec<GenConfig> = (0..a.samples)
        .map(|k| GenConfig { seed: a.seed.wrapping_add(k as u64), ..base.clone() })
        .collect();
    let results = run_samples(&pipeline, &img, &mask, &configs, a.jobs)?;

    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut records = Vec::with_capacity(results.len());
    let mut patches = Vec::with_capacity(results.len());
    for (k, ((g, ms), cfg)) in results.iter().zip(&configs).enumerate() {
        let path = sample_path(&a.out, k, a.samples);
        save_image(&path, &g.image)?;
        let q = quantize(&g.image);
        records.push(GenerationRecord {
            sample: k,
            seed: cfg.seed,
            output: path.display().to_string(),
            preservation_error: preservation_error(&img, &g.image, &g.effective_mask)?,
            preservation_error_quantized: preservation_error(&img, &q, &g.effective_mask)?,
            in_mask_change: in_mask_change(&img, &q, &g.effective_mask)?,
            effective_mask_pixels: g.effective_mask.count(),
            runtime_ms: a.timings.then_some(*ms),
        });
        patches.push(mask_patch(&q, &g.effective_mask)?);
    }
    let report = GenerationReport {
        metrics: PROXY_NOTE.into(),
        input: a.image.display().to_string(),
        mask: a.mask.display().to_string(),
        checkpoint: a.checkpoint.display().to_string(),
        codec_stride: model.header.codec_stride,
        config: base,
        records,
        diversity_proxy: diversity_score(&patches)?,
    };
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(&a.report, &report)?;
    writeln!(out, "wrote {} sample(s); report {}", report.records.len(), a.report.display())?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluateSummary {
    metrics: &'static str,
    samples: usize,
    max_preservation_error: f64,
    mean_in_mask_change: f64,
    diversity_proxy: f64,
}

fn evaluate_cmd(a: &EvaluateArgs, out: &mut dyn Write) -> std::result::Result<(), CliError> {
    let report: GenerationReport = read_json(&a.report)?;
    let img = load_image(Path::new(&report.input))?;
    let s = report.codec_stride;
    let mask = load_mask(Path::new(&report.mask))?.snap_to_grid(s).map_err(anyhow::Error::from)?;
    let (mut worst, mut change, mut patches) = (0.0f64, 0.0f64, Vec::new());
    for r in &report.records {
        let o = load_image(Path::new(&r.output))?;
        worst = worst.max(preservation_error(&img, &o, &mask)?);
        change += in_mask_change(&img, &o, &mask)?;
        patches.push(mask_patch(&o, &mask)?);
    }
    let summary = EvaluateSummary {
        metrics: PROXY_NOTE,
        samples: report.records.len(),
        max_preservation_error: worst,
        mean_in_mask_change: change / report.records.len().max(1) as f64,
        diversity_proxy: diversity_score(&patches)?,
    };
    write!(out, "{}", to_json(&summary)?).map_err(anyhow::Error::from)?;
    if let Some(limit) = a.max_preservation {
        if worst > limit {
            return Err(CliError::new(
                1,
                "preservation-exceeded",
                format!("preservation error {worst} exceeds {limit}"),
            ));
        }
    }
    Ok(())
}

fn selftest_cmd(out: &mut dyn Write) -> std::result::Result<(), CliError> {
    let results = run_selftest();
    let io = |e: std::io::Error| CliError::from(anyhow::Error::from(e));
    for r in &results {
        writeln!(out, "{} {:<28} {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail).map_err(io)?;
    }
    let passed = results.iter().filter(|r| r.passed).count();
    writeln!(out, "selftest: {passed}/{} checks passed", results.len()).map_err(io)?;
    if passed == results.len() {
        Ok(())
    } else {
        Err(CliError::new(1, "selftest-failed", format!("{} check(s) failed", results.len() - passed)))
    }
}
