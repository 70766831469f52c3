//! The `vidctrl` command-line tool. Config files give the full run; flags override them.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidctrl_core::backbone::{embed_text, BackboneWeights};
use vidctrl_core::dataset::{generate_dataset, Modality, VideoRecord};
use vidctrl_core::diffusion::standard_normal;
use vidctrl_core::encoder::{propagation_reach, reach_string, ConditionBundle, EncoderVariant, EncoderWeights, ProbeContext};
use vidctrl_core::evaluation::{hex, run_sparsity_sweep, EvalConfig, MetricsRow, SweepModel};
use vidctrl_core::sampling::{sample_video, Control, SampleConfig, SamplerMode};
use vidctrl_core::training::{pretrain_backbone, train_encoder, Masking, StepLog, TrainConfig};
use vidctrl_core::vocab;

use crate::checkpoint::{self, LoadedBackbone, ScheduleSpec};
use crate::config::{self, parse_fraction, parse_list, AblateRun, BackboneRun, EncoderRun, EvalRun};
use crate::dataset_file::{read_dataset, write_dataset};
use crate::error::{exit, write_file, Error, Result};
use crate::images::{load_condition, save_video_frames};
use crate::report::{write_report, TrainingLog};

#[derive(Debug, Parser)]
#[command(name = "vidctrl", version, about = "Toy text-to-video diffusion with sparse keyframe control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic moving-shapes dataset.
    GenData(GenDataArgs),
    /// Pretrain the video backbone.
    TrainBackbone(RunArgs),
    /// Train a condition encoder against a frozen backbone.
    TrainEncoder(RunArgs),
    /// Generate one video, optionally controlled by keyframe conditions.
    Sample(SampleArgs),
    /// Sparsity sweep over trained checkpoints.
    Eval(RunArgs),
    /// Train every encoder variant, probe propagation and sweep them.
    Ablate(RunArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by the config-driven subcommands. Each overrides the matching config key
/// where the subcommand has one.
#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub modality: Option<String>,
    /// Comma-separated frame indices.
    #[arg(long)]
    pub keyframes: Option<String>,
    /// Comma-separated masking ratios, decimals or `a/b`.
    #[arg(long = "r-mask")]
    pub r_mask: Option<String>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Rerun from a metadata file written by an earlier `sample`; other flags override it.
    #[arg(long)]
    pub from_metadata: Option<PathBuf>,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Condition image per keyframe, in keyframe order.
    #[arg(long = "condition")]
    pub conditions: Vec<PathBuf>,
    #[arg(long)]
    pub keyframes: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub residuals_in_uncond: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything needed to reproduce a `sample` run, written next to the frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMetadata {
    pub backbone: PathBuf,
    pub encoder: Option<PathBuf>,
    pub prompt: String,
    pub conditions: Vec<PathBuf>,
    pub keyframes: Vec<usize>,
    pub modality: Option<Modality>,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub mode: SamplerMode,
    pub residuals_in_uncond: bool,
    pub frames: Vec<String>,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn main_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainBackbone(a) => cmd_train_backbone(&a),
        Command::TrainEncoder(a) => cmd_train_encoder(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn reject_flags(cmd: &str, flags: &[(&str, bool)]) -> Result<()> {
    match flags.iter().find(|(_, set)| *set) {
        Some((name, _)) => Err(usage(format!("{cmd} does not take --{name}"))),
        None => Ok(()),
    }
}

fn parse_keyframes(s: &str) -> Result<Vec<usize>> {
    parse_list(s, "--keyframes", |x| x.parse().ok())
}

fn parse_r_masks(s: &str) -> Result<Vec<f64>> {
    parse_list(s, "--r-mask", parse_fraction)
}

fn parse_variant(s: &str) -> Result<EncoderVariant> {
    s.parse().map_err(|e| usage(format!("--variant: {e}")))
}

fn parse_modality(s: &str) -> Result<Modality> {
    s.parse().map_err(|e| usage(format!("--modality: {e}")))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if a.frames == 0 || a.height == 0 || a.width == 0 {
        return Err(usage("--frames, --height and --width must be positive"));
    }
    let records = generate_dataset::<f32>(a.seed, a.count, a.frames, a.height, a.width)?;
    write_dataset(&a.out, &records)?;
    println!("wrote {} videos of {}x{}x{} to {}", a.count, a.frames, a.height, a.width, a.out.display());
    Ok(())
}

fn load_training_data(path: &Path) -> Result<Vec<VideoRecord<f32>>> {
    let data = read_dataset(path)?;
    if data.is_empty() {
        return Err(Error::Config(format!("{}: dataset is empty", path.display())));
    }
    Ok(data)
}

fn video_dims(data: &[VideoRecord<f32>]) -> (usize, usize, usize) {
    let (n, _, h, w) = data[0].rgb.dims4();
    (n, h, w)
}

fn log_path(out: &Path, configured: Option<&PathBuf>) -> PathBuf {
    configured.cloned().unwrap_or_else(|| out.with_extension("log.jsonl"))
}

/// Runs `body` with a step logger writing to `path`.
fn with_log<R>(path: &Path, body: impl FnOnce(&mut dyn FnMut(&StepLog)) -> Result<R>) -> Result<R> {
    let mut log = TrainingLog::create(path)?;
    let mut last = None;
    let r = body(&mut |s: &StepLog| {
        log.record(s);
        last = Some(s.loss);
    })?;
    log.finish()?;
    if let Some(l) = last {
        println!("final loss {l:.6}; log {}", path.display());
    }
    Ok(r)
}

fn cmd_train_backbone(a: &RunArgs) -> Result<()> {
    reject_flags(
        "train-backbone",
        &[("variant", a.variant.is_some()), ("modality", a.modality.is_some()), ("keyframes", a.keyframes.is_some()), ("r-mask", a.r_mask.is_some())],
    )?;
    let mut run: BackboneRun = config::load(&a.config)?;
    if let Some(s) = a.seed {
        run.seed = s;
    }
    if let Some(o) = &a.out {
        run.out = o.clone();
    }
    let data = load_training_data(&run.data)?;
    let (n, h, w) = video_dims(&data);
    let arch = run.arch(n, h, w);
    arch.validate()?;
    let cfg = run.train_config();
    let sched = ScheduleSpec { kind: cfg.schedule.clone(), steps: cfg.schedule_steps };
    let weights = with_log(&log_path(&run.out, run.log.as_ref()), |log| Ok(pretrain_backbone(&data, arch, &cfg, log)?))?;
    checkpoint::save_backbone(&run.out, &weights, &sched)?;
    println!("backbone {} -> {}", hex(&weights.digest()), run.out.display());
    Ok(())
}

fn encoder_train_config(run: &EncoderRun, bb: &LoadedBackbone) -> TrainConfig {
    run.train_config(&bb.schedule.kind, bb.schedule.steps)
}

fn cmd_train_encoder(a: &RunArgs) -> Result<()> {
    reject_flags("train-encoder", &[("r-mask", a.r_mask.is_some())])?;
    let mut run: EncoderRun = config::load(&a.config)?;
    if let Some(s) = a.seed {
        run.seed = s;
    }
    if let Some(o) = &a.out {
        run.out = o.clone();
    }
    if let Some(v) = &a.variant {
        run.variant = parse_variant(v)?.name().into();
    }
    if let Some(m) = &a.modality {
        run.modality = parse_modality(m)?.name().into();
    }
    if let Some(k) = &a.keyframes {
        run.keyframes = Some(parse_keyframes(k)?);
    }
    let (variant, modality) = (run.variant()?, run.modality()?);
    let bb = checkpoint::load_backbone(&run.backbone)?;
    let data = load_training_data(&run.data)?;
    let cfg = encoder_train_config(&run, &bb);
    let digest = bb.weights.digest();
    let enc = with_log(&log_path(&run.out, run.log.as_ref()), |log| {
        Ok(train_encoder(&data, &bb.weights, variant, modality, &cfg, log)?)
    })?;
    if bb.weights.digest() != digest {
        return Err(Error::Integrity("backbone changed during encoder training".into()));
    }
    checkpoint::save_encoder(&run.out, &enc, Some(digest))?;
    println!("{} {} encoder -> {}", variant, modality.name(), run.out.display());
    Ok(())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

/// Merges `--from-metadata` with the explicit flags; flags win.
fn sample_request(a: &SampleArgs) -> Result<SampleMetadata> {
    let base = match &a.from_metadata {
        Some(p) => Some(config::load_json::<SampleMetadata>(p)?),
        None => None,
    };
    let defaults = SampleConfig::default();
    let backbone = a.backbone.clone().or(base.as_ref().map(|m| m.backbone.clone())).ok_or_else(|| usage("--backbone is required"))?;
    let prompt = a.prompt.clone().or(base.as_ref().map(|m| m.prompt.clone())).ok_or_else(|| usage("--prompt is required"))?;
    let encoder = a.encoder.clone().or(base.as_ref().and_then(|m| m.encoder.clone()));
    let conditions = if a.conditions.is_empty() { base.as_ref().map(|m| m.conditions.clone()).unwrap_or_default() } else { a.conditions.clone() };
    let keyframes = match &a.keyframes {
        Some(k) => parse_keyframes(k)?,
        None => base.as_ref().map(|m| m.keyframes.clone()).unwrap_or_default(),
    };
    let mode = match &a.mode {
        Some(m) => m.parse().map_err(|e| usage(format!("--mode: {e}")))?,
        None => base.as_ref().map_or(defaults.mode, |m| m.mode),
    };
    Ok(SampleMetadata {
        backbone,
        encoder,
        prompt,
        conditions,
        keyframes,
        modality: None,
        seed: a.seed.or(base.as_ref().map(|m| m.seed)).unwrap_or(defaults.seed),
        steps: a.steps.or(base.as_ref().map(|m| m.steps)).unwrap_or(defaults.steps),
        guidance: a.guidance.or(base.as_ref().map(|m| m.guidance)).unwrap_or(defaults.guidance),
        mode,
        residuals_in_uncond: a.residuals_in_uncond || base.as_ref().is_some_and(|m| m.residuals_in_uncond),
        frames: Vec::new(),
    })
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let mut req = sample_request(a)?;
    if req.conditions.len() != req.keyframes.len() {
        return Err(usage(format!("{} condition files for {} keyframes", req.conditions.len(), req.keyframes.len())));
    }
    let tokens = vocab::tokenize(&req.prompt).map_err(|e| usage(format!("--prompt: {e}")))?;
    let bb = checkpoint::load_backbone(&req.backbone)?;
    let arch = bb.weights.config();
    if let Some(&k) = req.keyframes.iter().find(|&&k| k >= arch.frames) {
        return Err(usage(format!("keyframe {k} out of range for {} frames", arch.frames)));
    }
    let sched = bb.schedule.build()?;
    let sc = SampleConfig {
        steps: req.steps,
        guidance: req.guidance,
        mode: req.mode,
        seed: req.seed,
        residuals_in_uncond: req.residuals_in_uncond,
    };
    let video = if req.conditions.is_empty() {
        sample_video(&bb.weights, None, &tokens, &sched, &sc)?
    } else {
        let enc_path = req.encoder.clone().ok_or_else(|| usage("condition files need --encoder"))?;
        let enc = checkpoint::load_encoder(&enc_path)?;
        checkpoint::check_pairing(&enc, &bb.weights)?;
        let modality = enc.weights.modality();
        let maps = req
            .conditions
            .iter()
            .map(|p| load_condition(p, modality, arch.height, arch.width))
            .collect::<Result<Vec<_>>>()?;
        let bundle = ConditionBundle::from_keyframes(arch.frames, &req.keyframes, &maps, modality)
            .map_err(|e| usage(e.to_string()))?;
        req.modality = Some(modality);
        req.encoder = Some(absolute(&enc_path)?);
        sample_video(&bb.weights, Some(Control { encoder: &enc.weights, bundle: &bundle }), &tokens, &sched, &sc)?
    };
    if !req.conditions.is_empty() {
        req.conditions = req.conditions.iter().map(|p| absolute(p)).collect::<Result<_>>()?;
    } else {
        req.encoder = None;
    }
    req.backbone = absolute(&req.backbone)?;
    let files = save_video_frames(&a.out, &video)?;
    req.frames = files.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect();
    let meta = serde_json::to_string_pretty(&req).expect("metadata serializes");
    write_file(&a.out.join("metadata.json"), meta.as_bytes())?;
    println!("wrote {} frames to {}", files.len(), a.out.display());
    Ok(())
}

fn print_row(r: &MetricsRow) {
    println!(
        "{:<16} r_mask={:<6} mae_x100={:>9.4} keyframe_mae_x100={:>9.4} consistency_x100={:>8.3} off_palette={:.3}",
        r.variant, r.r_mask, r.mae_x100, r.keyframe_mae_x100, r.consistency_x100, r.off_palette_fraction
    );
}

fn unique_label(used: &mut Vec<String>, base: String, fallback: &Path) -> String {
    let label = if used.contains(&base) {
        fallback.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(base)
    } else {
        base
    };
    used.push(label.clone());
    label
}

fn cmd_eval(a: &RunArgs) -> Result<()> {
    reject_flags(
        "eval",
        &[("variant", a.variant.is_some()), ("modality", a.modality.is_some()), ("keyframes", a.keyframes.is_some())],
    )?;
    let mut run: EvalRun = config::load(&a.config)?;
    if let Some(s) = a.seed {
        run.sample_seeds = vec![s];
    }
    if let Some(o) = &a.out {
        run.out = o.clone();
    }
    if let Some(r) = &a.r_mask {
        run.r_mask = parse_r_masks(r)?;
    }
    let cfg = run.eval_config()?;
    let bb = checkpoint::load_backbone(&run.backbone)?;
    let mut encoders = Vec::new();
    for p in &run.encoders {
        let enc = checkpoint::load_encoder(p)?;
        checkpoint::check_pairing(&enc, &bb.weights)?;
        encoders.push((p.clone(), enc));
    }
    let data = read_dataset(&run.data)?;
    let mut used = Vec::new();
    let labels: Vec<String> = encoders.iter().map(|(p, e)| unique_label(&mut used, e.weights.variant().name().into(), p)).collect();
    let mut models: Vec<SweepModel<'_, f32>> = Vec::new();
    if run.include_backbone {
        models.push(SweepModel { label: "backbone", encoder: None });
    }
    for ((_, e), l) in encoders.iter().zip(&labels) {
        models.push(SweepModel { label: l, encoder: Some(&e.weights) });
    }
    let sched = bb.schedule.build()?;
    let report = run_sparsity_sweep(&bb.weights, &models, &data, &sched, &cfg, &mut print_row)?;
    let (txt, csv) = write_report(&run.out, &report, &[])?;
    println!("config digest {}; {} and {}", report.config_digest, txt.display(), csv.display());
    Ok(())
}

/// Single-keyframe influence map of `enc` on the first record of `data`.
fn probe_reach(enc: &EncoderWeights<f32>, bb: &BackboneWeights<f32>, record: &VideoRecord<f32>, t: usize, cfg: &EvalConfig) -> Result<String> {
    let modality = enc.modality();
    let dense = record.conditions(modality, cfg.sketch_threshold);
    let probe = ConditionBundle::from_dense(&dense, &[0], modality)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.feature_seed);
    let z_t = enc.variant().reads_noisy_sample().then(|| standard_normal(&bb.config().video_shape(), &mut rng));
    let ctx = ProbeContext { t, text: embed_text(&record.spec.prompt, bb)?, z_t };
    Ok(reach_string(&propagation_reach(enc, enc.variant(), &probe, &ctx)?))
}

fn cmd_ablate(a: &RunArgs) -> Result<()> {
    let mut run: AblateRun = config::load(&a.config)?;
    if let Some(s) = a.seed {
        run.seed = s;
    }
    if let Some(o) = &a.out {
        run.out = o.clone();
    }
    if let Some(v) = &a.variant {
        run.variants = vec![parse_variant(v)?.name().into()];
    }
    if let Some(m) = &a.modality {
        run.modality = parse_modality(m)?.name().into();
    }
    if let Some(r) = &a.r_mask {
        run.r_mask = parse_r_masks(r)?;
    }
    let keyframes = a.keyframes.as_deref().map(parse_keyframes).transpose()?;
    let variants = run.variants()?;
    let modality: Modality = run.modality.parse().map_err(|e| Error::Config(format!("modality: {e}")))?;
    let cfg = run.eval_config()?;
    cfg.validate()?;
    let bb = checkpoint::load_backbone(&run.backbone)?;
    let data = load_training_data(&run.data)?;
    let eval = read_dataset(&run.eval_data)?;
    if eval.is_empty() {
        return Err(Error::Config(format!("{}: evaluation dataset is empty", run.eval_data.display())));
    }
    let train = TrainConfig {
        steps: run.steps,
        seed: run.seed,
        adam: vidctrl_core::params::AdamConfig { lr: run.lr, ..Default::default() },
        grad_accum: run.grad_accum,
        schedule_steps: bb.schedule.steps,
        schedule: bb.schedule.kind.clone(),
        text_dropout: run.text_dropout,
        condition_dropout: run.condition_dropout,
        masking: keyframes.map_or(Masking::Random, Masking::Fixed),
        sketch_threshold: run.sketch_threshold,
        ..TrainConfig::default()
    };
    let digest = bb.weights.digest();
    let mut encoders = Vec::new();
    for v in &variants {
        let log = run.out.join(format!("train_{}.jsonl", v.name()));
        println!("training {v}");
        let enc = with_log(&log, |l| Ok(train_encoder(&data, &bb.weights, *v, modality, &train, l)?))?;
        checkpoint::save_encoder(&run.out.join(format!("encoder_{}.ckpt", v.name())), &enc, Some(digest))?;
        encoders.push(enc);
    }
    let probe_t = bb.schedule.steps / 2;
    let mut reach = String::new();
    for e in &encoders {
        let r = probe_reach(e, &bb.weights, &eval[0], probe_t, &cfg)?;
        println!("reach {:<16} {r}", e.variant().name());
        reach.push_str(&format!("{}: {r}\n", e.variant().name()));
    }
    let mut models = vec![SweepModel { label: "backbone", encoder: None }];
    models.extend(encoders.iter().map(|e| SweepModel { label: e.variant().name(), encoder: Some(e) }));
    let sched = bb.schedule.build()?;
    let report = run_sparsity_sweep(&bb.weights, &models, &eval, &sched, &cfg, &mut print_row)?;
    let extra = vec![(format!("reach keyframe=0 t={probe_t}"), reach.trim_end().to_string())];
    let (txt, csv) = write_report(&run.out, &report, &extra)?;
    println!("config digest {}; {} and {}", report.config_digest, txt.display(), csv.display());
    Ok(())
}
