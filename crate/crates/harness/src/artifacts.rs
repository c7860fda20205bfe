//! JSON artifacts: dataset manifests, mask indexes and generation reports.
//! All are pretty-printed with fields in declaration order.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use maskdiff::pipeline::GenConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::masks::MaskSpec;

pub const PROXY_NOTE: &str = "proxy metrics on raw pixels; not Inception Score or LPIPS";

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Relative to the manifest's directory.
    pub image: String,
    pub class: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub size: usize,
    pub count_per_class: usize,
    pub codec_stride: usize,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub seed: u64,
    pub classes: Vec<String>,
    pub generator: GeneratorParams,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    /// Every referenced image must exist under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for s in &self.samples {
            if !dir.join(&s.image).is_file() {
                bail!("manifest references missing image {}", s.image);
            }
            if !self.classes.contains(&s.class) {
                bail!("sample {} has undeclared class {}", s.image, s.class);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub mask: String,
    pub area_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskIndex {
    pub seed: u64,
    pub size: usize,
    pub spec: MaskSpec,
    pub masks: Vec<MaskRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub sample: usize,
    pub seed: u64,
    pub output: String,
    /// Before 8-bit quantization.
    pub preservation_error: f64,
    pub preservation_error_quantized: f64,
    pub in_mask_change: f64,
    pub effective_mask_pixels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub metrics: String,
    pub input: String,
    pub mask: String,
    pub checkpoint: String,
    pub codec_stride: usize,
    pub config: GenConfig,
    pub records: Vec<GenerationRecord>,
    /// Mean pairwise L1 of downsampled in-mask patches across samples.
    pub diversity_proxy: f64,
}
