//! Flat TOML run configurations. Unknown, missing or mistyped keys are
//! configuration errors that name the key.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use vidctrl_core::backbone::ArchConfig;
use vidctrl_core::dataset::{Modality, DEFAULT_SKETCH_THRESHOLD};
use vidctrl_core::encoder::EncoderVariant;
use vidctrl_core::evaluation::{EvalConfig, STANDARD_R_MASKS};
use vidctrl_core::params::AdamConfig;
use vidctrl_core::sampling::SamplerMode;
use vidctrl_core::training::{Masking, TrainConfig};

use crate::error::{read_file, Error, Result};

/// Parses `text` as `T`; `origin` prefixes error messages.
pub fn parse<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let key = e.span().and_then(|s| key_at(text, s.start));
        match key {
            Some(k) if !e.message().contains(&format!("`{k}`")) => Error::Config(format!("{origin}: key `{k}`: {}", e.message())),
            _ => Error::Config(format!("{origin}: {}", e.message())),
        }
    })
}

/// The `key` of the `key = value` line containing byte offset `at`.
fn key_at(text: &str, at: usize) -> Option<&str> {
    let start = text[..at.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next()?;
    let (k, _) = line.split_once('=')?;
    let k = k.trim().trim_matches('"');
    (!k.is_empty()).then_some(k)
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
    parse(&text, &path.display().to_string())
}

/// Reads a JSON document such as a sample metadata file.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn d_seed() -> u64 {
    0
}
fn d_lr() -> f64 {
    AdamConfig::default().lr
}
fn d_one() -> usize {
    1
}
fn d_schedule() -> String {
    "linear-vp".into()
}
fn d_schedule_steps() -> usize {
    1000
}
fn d_text_dropout() -> f64 {
    0.1
}
fn d_condition_dropout() -> f64 {
    0.05
}
fn d_sketch() -> f64 {
    DEFAULT_SKETCH_THRESHOLD
}
fn d_digest_every() -> usize {
    100
}
fn d_widths() -> [usize; 2] {
    ArchConfig::default().widths
}
fn d_groups() -> usize {
    ArchConfig::default().groups
}
fn d_dim() -> usize {
    32
}
fn d_r_masks() -> Vec<f64> {
    STANDARD_R_MASKS.to_vec()
}
fn d_seeds() -> Vec<u64> {
    vec![0]
}
fn d_sample_steps() -> usize {
    50
}
fn d_guidance() -> f64 {
    3.0
}
fn d_mode() -> String {
    "deterministic".into()
}
fn d_feature_dim() -> usize {
    64
}
fn d_modality() -> String {
    "depth".into()
}
fn d_variants() -> Vec<String> {
    EncoderVariant::ALL.iter().map(|v| v.name().to_string()).collect()
}

/// Backbone pretraining run.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneRun {
    pub data: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    pub steps: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_one")]
    pub grad_accum: usize,
    #[serde(default = "d_schedule")]
    pub schedule: String,
    #[serde(default = "d_schedule_steps")]
    pub schedule_steps: usize,
    #[serde(default = "d_text_dropout")]
    pub text_dropout: f64,
    #[serde(default = "d_widths")]
    pub widths: [usize; 2],
    #[serde(default = "d_groups")]
    pub groups: usize,
    #[serde(default = "d_dim")]
    pub time_dim: usize,
    #[serde(default = "d_dim")]
    pub text_dim: usize,
    #[serde(default = "d_dim")]
    pub attn_dim: usize,
}

impl BackboneRun {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            seed: self.seed,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            grad_accum: self.grad_accum,
            schedule_steps: self.schedule_steps,
            schedule: self.schedule.clone(),
            text_dropout: self.text_dropout,
            ..TrainConfig::default()
        }
    }

    /// Architecture for videos of `[frames, 3, height, width]`.
    pub fn arch(&self, frames: usize, height: usize, width: usize) -> ArchConfig {
        ArchConfig {
            frames,
            channels: 3,
            height,
            width,
            widths: self.widths,
            groups: self.groups,
            time_dim: self.time_dim,
            text_dim: self.text_dim,
            attn_dim: self.attn_dim,
            vocab_size: ArchConfig::default().vocab_size,
        }
    }
}

/// Encoder training run against a frozen backbone checkpoint.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderRun {
    pub data: PathBuf,
    pub backbone: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub log: Option<PathBuf>,
    pub variant: String,
    pub modality: String,
    #[serde(default = "d_seed")]
    pub seed: u64,
    pub steps: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_one")]
    pub grad_accum: usize,
    #[serde(default = "d_text_dropout")]
    pub text_dropout: f64,
    #[serde(default = "d_condition_dropout")]
    pub condition_dropout: f64,
    /// Fixed keyframes for every sample; random masking when absent.
    #[serde(default)]
    pub keyframes: Option<Vec<usize>>,
    #[serde(default = "d_sketch")]
    pub sketch_threshold: f64,
    #[serde(default = "d_digest_every")]
    pub digest_every: usize,
}

impl EncoderRun {
    pub fn variant(&self) -> Result<EncoderVariant> {
        self.variant.parse().map_err(|e| Error::Config(format!("variant: {e}")))
    }

    pub fn modality(&self) -> Result<Modality> {
        self.modality.parse().map_err(|e| Error::Config(format!("modality: {e}")))
    }

    pub fn train_config(&self, schedule: &str, schedule_steps: usize) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            seed: self.seed,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            grad_accum: self.grad_accum,
            schedule_steps,
            schedule: schedule.into(),
            text_dropout: self.text_dropout,
            condition_dropout: self.condition_dropout,
            masking: match &self.keyframes {
                Some(k) => Masking::Fixed(k.clone()),
                None => Masking::Random,
            },
            sketch_threshold: self.sketch_threshold,
            digest_every: self.digest_every,
        }
    }
}

macro_rules! eval_config_method {
    ($t:ty) => {
        impl $t {
            pub fn eval_config(&self) -> Result<EvalConfig> {
                let mode: SamplerMode = self.mode.parse().map_err(|e| Error::Config(format!("mode: {e}")))?;
                Ok(EvalConfig {
                    r_masks: self.r_mask.clone(),
                    feature_dim: self.feature_dim,
                    feature_seed: self.feature_seed,
                    seeds: self.sample_seeds.clone(),
                    steps: self.sample_steps,
                    guidance: self.guidance,
                    mode,
                    sketch_threshold: self.sketch_threshold,
                })
            }
        }
    };
}

/// Sparsity sweep over trained checkpoints.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub backbone: PathBuf,
    pub encoders: Vec<PathBuf>,
    /// Held-out dataset; must not share scene seeds with training data.
    pub data: PathBuf,
    pub out: PathBuf,
    /// Also report the bare backbone.
    #[serde(default)]
    pub include_backbone: bool,
    #[serde(default = "d_r_masks")]
    pub r_mask: Vec<f64>,
    #[serde(default = "d_seeds")]
    pub sample_seeds: Vec<u64>,
    #[serde(default = "d_sample_steps")]
    pub sample_steps: usize,
    #[serde(default = "d_guidance")]
    pub guidance: f64,
    #[serde(default = "d_mode")]
    pub mode: String,
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "d_seed")]
    pub feature_seed: u64,
    #[serde(default = "d_sketch")]
    pub sketch_threshold: f64,
}

/// Trains every listed variant against one backbone, then probes and sweeps them.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateRun {
    pub data: PathBuf,
    pub eval_data: PathBuf,
    pub backbone: PathBuf,
    pub out: PathBuf,
    #[serde(default = "d_variants")]
    pub variants: Vec<String>,
    #[serde(default = "d_modality")]
    pub modality: String,
    #[serde(default = "d_seed")]
    pub seed: u64,
    pub steps: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_one")]
    pub grad_accum: usize,
    #[serde(default = "d_condition_dropout")]
    pub condition_dropout: f64,
    #[serde(default = "d_text_dropout")]
    pub text_dropout: f64,
    #[serde(default = "d_r_masks")]
    pub r_mask: Vec<f64>,
    #[serde(default = "d_seeds")]
    pub sample_seeds: Vec<u64>,
    #[serde(default = "d_sample_steps")]
    pub sample_steps: usize,
    #[serde(default = "d_guidance")]
    pub guidance: f64,
    #[serde(default = "d_mode")]
    pub mode: String,
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "d_seed")]
    pub feature_seed: u64,
    #[serde(default = "d_sketch")]
    pub sketch_threshold: f64,
}

eval_config_method!(EvalRun);
eval_config_method!(AblateRun);

impl AblateRun {
    pub fn variants(&self) -> Result<Vec<EncoderVariant>> {
        self.variants.iter().map(|v| v.parse().map_err(|e| Error::Config(format!("variants: {e}")))).collect()
    }
}

/// Parses a comma-separated list such as `0,15` or `0,1/2,0.75`.
pub fn parse_list<T>(text: &str, what: &str, item: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| item(s).ok_or_else(|| Error::Usage(format!("{what}: cannot parse `{s}`"))))
        .collect()
}

/// A fraction written as a decimal or `a/b`.
pub fn parse_fraction(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
            (b != 0.0).then(|| a / b)
        }
        None => s.parse().ok(),
    }
}
