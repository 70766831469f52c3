//! Backbone pretraining and frozen-backbone encoder training with random
//! keyframe masking.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::backbone::{embed_text, ArchConfig, BackboneWeights};
use crate::dataset::{Modality, VideoRecord, DEFAULT_SKETCH_THRESHOLD};
use crate::diffusion::{add_noise, standard_normal, DiffusionSchedule, VideoTensor};
use crate::encoder::{build_encoder_input, ConditionBundle, EncoderVariant, EncoderWeights};
use crate::error::{ensure, Error, Result};
use crate::params::{Adam, AdamConfig};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vocab::TokenId;

/// Number of conditioned frames and which ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingDraw {
    pub frames: usize,
    pub count: usize,
    pub indices: Vec<usize>,
}

/// `N_c` uniform on `1..=frames`, then `N_c` distinct indices uniformly without replacement.
pub fn sample_condition_indices<R: Rng + ?Sized>(frames: usize, rng: &mut R) -> Result<MaskingDraw> {
    ensure!(frames >= 1, "need at least one frame");
    let count = rng.random_range(1..=frames);
    let mut indices = index::sample(rng, frames, count).into_vec();
    indices.sort_unstable();
    Ok(MaskingDraw { frames, count, indices })
}

/// Conditions extracted at the drawn frames only.
pub fn make_training_bundle<T: Real>(
    record: &VideoRecord<T>,
    modality: Modality,
    draw: &MaskingDraw,
    sketch_threshold: f64,
) -> Result<ConditionBundle<T>> {
    ensure!(draw.frames == record.frames(), "draw is for {} frames, record has {}", draw.frames, record.frames());
    let maps: Vec<Tensor<T>> = draw
        .indices
        .iter()
        .map(|&i| {
            crate::dataset::extract_condition(
                &crate::dataset::frame(&record.rgb, i),
                &crate::dataset::frame(&record.depth, i),
                modality,
                sketch_threshold,
            )
        })
        .collect();
    let (n, _, h, w) = record.rgb.dims4();
    if maps.is_empty() {
        return Ok(ConditionBundle::empty(n, h, w, modality));
    }
    ConditionBundle::from_keyframes(n, &draw.indices, &maps, modality)
}

/// How keyframes are chosen for each encoder training sample.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Masking {
    /// Count and indices drawn uniformly for every sample.
    Random,
    /// The same keyframes every time.
    Fixed(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Samples averaged per optimizer step.
    pub grad_accum: usize,
    pub schedule_steps: usize,
    pub schedule: alloc::string::String,
    /// Probability of training on the null prompt.
    pub text_dropout: f64,
    /// Probability of an encoder sample with no conditioned frames.
    pub condition_dropout: f64,
    pub masking: Masking,
    pub sketch_threshold: f64,
    /// Steps between backbone digest checks during encoder training.
    pub digest_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            seed: 0,
            adam: AdamConfig::default(),
            grad_accum: 1,
            schedule_steps: 1000,
            schedule: "linear-vp".into(),
            text_dropout: 0.1,
            condition_dropout: 0.05,
            masking: Masking::Random,
            sketch_threshold: DEFAULT_SKETCH_THRESHOLD,
            digest_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.grad_accum == 0 {
            return bad("grad_accum must be at least 1".into());
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.adam.lr));
        }
        for (k, p) in [("text_dropout", self.text_dropout), ("condition_dropout", self.condition_dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{k} must be a probability, got {p}"));
            }
        }
        if self.digest_every == 0 {
            return bad("digest_every must be at least 1".into());
        }
        self.make_schedule().map(|_| ())
    }

    pub fn make_schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::make(self.schedule_steps, &self.schedule)
    }
}

/// One optimizer step: step index and mean loss over the accumulated samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
}

/// One training example: clean video, noise, step and prompt.
#[derive(Clone, Debug)]
pub struct NoisedSample<T> {
    pub z0: VideoTensor<T>,
    pub eps: VideoTensor<T>,
    pub t: usize,
    pub tokens: Vec<TokenId>,
}

impl<T: Real> NoisedSample<T> {
    pub fn draw<R: Rng + ?Sized>(record: &VideoRecord<T>, sched: &DiffusionSchedule, text_dropout: f64, rng: &mut R) -> Self {
        let t = rng.random_range(0..sched.steps());
        let eps = standard_normal(record.rgb.shape(), rng);
        let drop = rng.random_bool(text_dropout);
        let tokens = if drop { Vec::new() } else { record.spec.prompt.clone() };
        Self { z0: record.rgb.clone(), eps, t, tokens }
    }
}

/// Diffusion loss of the backbone and, optionally, its gradient for every backbone parameter.
pub fn backbone_loss<T: Real>(
    weights: &BackboneWeights<T>,
    sample: &NoisedSample<T>,
    sched: &DiffusionSchedule,
    with_grad: bool,
) -> Result<(T, Option<Vec<Tensor<T>>>)> {
    weights.check_video(&sample.z0)?;
    let z_t = add_noise(&sample.z0, &sample.eps, sample.t, sched)?;
    embed_text(&sample.tokens, weights)?;
    let mut g = Graph::new();
    let p = weights.params().bind(&mut g, with_grad);
    let z = g.constant(z_t);
    let text = weights.text_in_graph(&mut g, &p, &sample.tokens);
    let pred = weights.forward_in(&mut g, &p, z, sample.t, text, None);
    let target = g.constant(sample.eps.clone());
    let loss = g.mse(pred, target);
    let value = g.value(loss).data()[0];
    let grads = with_grad.then(|| {
        let mut gr = g.backward(loss);
        p.gradients(weights.params(), &mut gr)
    });
    Ok((value, grads))
}

/// Diffusion loss of the backbone with encoder residuals injected, and optionally the
/// gradient for every encoder parameter. The backbone enters the graph as constants.
pub fn composite_loss<T: Real>(
    backbone: &BackboneWeights<T>,
    encoder: &EncoderWeights<T>,
    bundle: &ConditionBundle<T>,
    sample: &NoisedSample<T>,
    sched: &DiffusionSchedule,
    with_grad: bool,
) -> Result<(T, Option<Vec<Tensor<T>>>)> {
    ensure!(encoder.config() == backbone.config(), "encoder and backbone architectures differ");
    ensure!(bundle.modality() == encoder.modality(), "bundle is {}, encoder is {}", bundle.modality().name(), encoder.modality().name());
    backbone.check_video(&sample.z0)?;
    let z_t = add_noise(&sample.z0, &sample.eps, sample.t, sched)?;
    let text = embed_text(&sample.tokens, backbone)?;
    let input = build_encoder_input(bundle);
    let variant = encoder.variant();
    encoder.check_inputs(&input, variant.reads_noisy_sample().then_some(&z_t), variant)?;

    let mut g = Graph::new();
    let bp = backbone.params().bind(&mut g, false);
    let ep = encoder.params().bind(&mut g, with_grad);
    let z = g.constant(z_t);
    let txt = g.constant(text.vectors);
    let x = g.constant(input);
    let res = encoder.forward_in(&mut g, &ep, x, variant.reads_noisy_sample().then_some(z), sample.t, txt);
    let pred = backbone.forward_in(&mut g, &bp, z, sample.t, txt, Some(&res));
    let target = g.constant(sample.eps.clone());
    let loss = g.mse(pred, target);
    let value = g.value(loss).data()[0];
    let grads = with_grad.then(|| {
        let mut gr = g.backward(loss);
        ep.gradients(encoder.params(), &mut gr)
    });
    Ok((value, grads))
}

fn check_dataset<T: Real>(dataset: &[VideoRecord<T>], arch: &ArchConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let want = arch.video_shape();
    for (i, r) in dataset.iter().enumerate() {
        if r.rgb.shape() != want {
            return Err(Error::Config(format!("record {i} has shape {:?}, architecture expects {:?}", r.rgb.shape(), want)));
        }
    }
    Ok(())
}

fn accumulate<T: Real>(acc: &mut Option<Vec<Tensor<T>>>, g: Vec<Tensor<T>>) {
    match acc {
        None => *acc = Some(g),
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y)),
    }
}

fn averaged<T: Real>(acc: Option<Vec<Tensor<T>>>, n: usize) -> Vec<Tensor<T>> {
    let s = T::one() / T::from_usize(n).unwrap();
    acc.unwrap_or_default().into_iter().map(|g| g.scale(s)).collect()
}

/// Trains fresh backbone weights seeded from `cfg.seed`.
pub fn pretrain_backbone<T: Real>(
    dataset: &[VideoRecord<T>],
    arch: ArchConfig,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<BackboneWeights<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = BackboneWeights::new(arch, &mut rng)?;
    train_backbone_steps(&mut weights, dataset, cfg, log)?;
    Ok(weights)
}

/// Continues training `weights` for `cfg.steps` optimizer steps.
pub fn train_backbone_steps<T: Real>(
    weights: &mut BackboneWeights<T>,
    dataset: &[VideoRecord<T>],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<()> {
    cfg.validate()?;
    check_dataset(dataset, weights.config())?;
    let sched = cfg.make_schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut adam = Adam::new(cfg.adam, weights.params());
    for step in 0..cfg.steps {
        let mut acc = None;
        let mut total = 0.0;
        for _ in 0..cfg.grad_accum {
            let rec = &dataset[rng.random_range(0..dataset.len())];
            let sample = NoisedSample::draw(rec, &sched, cfg.text_dropout, &mut rng);
            let (loss, grads) = backbone_loss(weights, &sample, &sched, true)?;
            total += loss.as_f64();
            accumulate(&mut acc, grads.expect("requested"));
        }
        let grads = averaged(acc, cfg.grad_accum);
        adam.step(weights.params_mut(), &grads);
        log(&StepLog { step, loss: total / cfg.grad_accum as f64 });
    }
    Ok(())
}

fn draw_bundle<T: Real, R: Rng + ?Sized>(
    record: &VideoRecord<T>,
    modality: Modality,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ConditionBundle<T>> {
    let n = record.frames();
    let draw = match &cfg.masking {
        Masking::Random => sample_condition_indices(n, rng)?,
        Masking::Fixed(k) => {
            let mut indices = k.clone();
            indices.sort_unstable();
            MaskingDraw { frames: n, count: k.len(), indices }
        }
    };
    if rng.random_bool(cfg.condition_dropout) {
        let (_, _, h, w) = record.rgb.dims4();
        return Ok(ConditionBundle::empty(n, h, w, modality));
    }
    make_training_bundle(record, modality, &draw, cfg.sketch_threshold)
}

/// Trains a new encoder initialized from the frozen `backbone`. The backbone digest is
/// re-checked every `cfg.digest_every` steps and at the end.
pub fn train_encoder<T: Real>(
    dataset: &[VideoRecord<T>],
    backbone: &BackboneWeights<T>,
    variant: EncoderVariant,
    modality: Modality,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<EncoderWeights<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = EncoderWeights::from_backbone(backbone, variant, modality, &mut rng)?;
    train_encoder_steps(&mut encoder, dataset, backbone, None, cfg, log)?;
    Ok(encoder)
}

/// Continues training `encoder` for `cfg.steps` steps. When `expected_digest` is given
/// the backbone must match it before the first step.
pub fn train_encoder_steps<T: Real>(
    encoder: &mut EncoderWeights<T>,
    dataset: &[VideoRecord<T>],
    backbone: &BackboneWeights<T>,
    expected_digest: Option<[u8; 32]>,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<()> {
    cfg.validate()?;
    check_dataset(dataset, backbone.config())?;
    if encoder.config() != backbone.config() {
        return Err(Error::Config("encoder and backbone architectures differ".into()));
    }
    let digest = backbone.digest();
    if expected_digest.is_some_and(|d| d != digest) {
        return Err(Error::Integrity("backbone digest does not match the expected value".into()));
    }
    let sched = cfg.make_schedule()?;
    let modality = encoder.modality();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x656e_636f);
    let mut adam = Adam::new(cfg.adam, encoder.params());
    for step in 0..cfg.steps {
        let mut acc = None;
        let mut total = 0.0;
        for _ in 0..cfg.grad_accum {
            let rec = &dataset[rng.random_range(0..dataset.len())];
            let bundle = draw_bundle(rec, modality, cfg, &mut rng)?;
            let sample = NoisedSample::draw(rec, &sched, cfg.text_dropout, &mut rng);
            let (loss, grads) = composite_loss(backbone, encoder, &bundle, &sample, &sched, true)?;
            total += loss.as_f64();
            accumulate(&mut acc, grads.expect("requested"));
        }
        let grads = averaged(acc, cfg.grad_accum);
        adam.step(encoder.params_mut(), &grads);
        log(&StepLog { step, loss: total / cfg.grad_accum as f64 });
        if (step + 1) % cfg.digest_every == 0 || step + 1 == cfg.steps {
            if backbone.digest() != digest {
                return Err(Error::Integrity(format!("backbone weights changed during encoder training (step {step})")));
            }
        }
    }
    Ok(())
}

/// Fixed evaluation draws: the same `(t, ε)` pairs for every call with equal arguments.
pub fn fixed_draws<T: Real>(record: &VideoRecord<T>, sched: &DiffusionSchedule, count: usize, seed: u64) -> Vec<NoisedSample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut s = NoisedSample::draw(record, sched, 0.0, &mut rng);
            // stratify the steps so a small draw set still covers the schedule
            s.t = ((i as f64 + rng.random::<f64>()) / count as f64 * sched.steps() as f64) as usize;
            s.t = s.t.min(sched.steps() - 1);
            s
        })
        .collect()
}

/// Mean backbone loss over `draws`.
pub fn backbone_eval_loss<T: Real>(weights: &BackboneWeights<T>, draws: &[NoisedSample<T>], sched: &DiffusionSchedule) -> Result<f64> {
    ensure!(!draws.is_empty(), "no evaluation draws");
    let mut total = 0.0;
    for d in draws {
        total += backbone_loss(weights, d, sched, false)?.0.as_f64();
    }
    Ok(total / draws.len() as f64)
}

/// Exponential moving average with smoothing `2/(window+1)`.
pub fn loss_ema(losses: &[f64], window: usize) -> Vec<f64> {
    let a = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(losses.len());
    let mut m = None;
    for &l in losses {
        let next = match m {
            None => l,
            Some(prev) => a * l + (1.0 - a) * prev,
        };
        m = Some(next);
        out.push(next);
    }
    out
}
