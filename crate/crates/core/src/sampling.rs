//! Iterative denoising with classifier-free guidance and encoder residual injection.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_forward, embed_text, null_embedding, BackboneWeights, ResidualStack, TextEmbedding};
use crate::diffusion::{standard_normal, DiffusionSchedule, VideoTensor};
use crate::encoder::{build_encoder_input, encoder_forward, ConditionBundle, EncoderWeights};
use crate::error::{ensure, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SamplerMode {
    Deterministic,
    /// Full-variance ancestral noise (η = 1).
    Stochastic,
}

impl core::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Self::Deterministic),
            "stochastic" => Ok(Self::Stochastic),
            _ => Err(Error::Config(alloc::format!("unknown sampler mode {s:?}"))),
        }
    }
}

impl SamplerMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Deterministic => "deterministic",
            Self::Stochastic => "stochastic",
        }
    }
}

/// `u + w·(c − u)`; `w = 1` and `w = 0` return the branches unchanged.
pub fn cfg_combine<T: Real>(eps_uncond: &VideoTensor<T>, eps_cond: &VideoTensor<T>, w: f64) -> Result<VideoTensor<T>> {
    ensure!(eps_uncond.shape() == eps_cond.shape(), "shape mismatch {:?} vs {:?}", eps_uncond.shape(), eps_cond.shape());
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let w = T::lit(w);
    eps_uncond.zip_map(eps_cond, |u, c| u + w * (c - u))
}

/// Moves `z_t` to `t_prev`, or to the clean sample when `t_prev` is `None`.
pub fn denoise_step<T: Real, R: Rng + ?Sized>(
    z_t: &VideoTensor<T>,
    eps_pred: &VideoTensor<T>,
    t: usize,
    t_prev: Option<usize>,
    sched: &DiffusionSchedule,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<VideoTensor<T>> {
    sched.check_step(t)?;
    ensure!(z_t.shape() == eps_pred.shape(), "shape mismatch {:?} vs {:?}", z_t.shape(), eps_pred.shape());
    let (a_prev, s_prev) = match t_prev {
        Some(tp) => {
            ensure!(t > tp, "t ({t}) must exceed t_prev ({tp})");
            (sched.alpha(tp), sched.sigma(tp))
        }
        None => (1.0, 0.0),
    };
    let (a_t, s_t) = (sched.alpha(t), sched.sigma(t));
    let one = T::one();
    let z0 = z_t.zip_map(eps_pred, |z, e| ((z - T::lit(s_t) * e) / T::lit(a_t)).max(-one).min(one))?;
    match mode {
        SamplerMode::Deterministic => z0.zip_map(eps_pred, |x, e| T::lit(a_prev) * x + T::lit(s_prev) * e),
        SamplerMode::Stochastic => {
            let ratio = (a_t / a_prev) * (a_t / a_prev);
            let fresh_var = if s_t > 0.0 { (s_prev * s_prev / (s_t * s_t)) * (1.0 - ratio) } else { 0.0 };
            let fresh_var = fresh_var.clamp(0.0, s_prev * s_prev);
            let kept = (s_prev * s_prev - fresh_var).sqrt();
            let noise = standard_normal::<T, R>(z_t.shape(), rng);
            let mut out = z0.zip_map(eps_pred, |x, e| T::lit(a_prev) * x + T::lit(kept) * e)?;
            let f = T::lit(fresh_var.sqrt());
            out.data_mut().iter_mut().zip(noise.data()).for_each(|(o, &n)| *o += f * n);
            Ok(out)
        }
    }
}

/// Descending sampling steps: `steps` values spread over `[0, T−1]`, ending at 0.
pub fn timestep_sequence(schedule_steps: usize, steps: usize) -> Result<Vec<usize>> {
    ensure!(steps >= 1, "need at least one sampling step");
    ensure!(steps <= schedule_steps, "{steps} sampling steps exceed the {schedule_steps}-step schedule");
    if steps == 1 {
        return Ok(alloc::vec![schedule_steps - 1]);
    }
    let last = (schedule_steps - 1) as f64;
    let mut ts: Vec<usize> = (0..steps).map(|i| libm::round(i as f64 * last / (steps - 1) as f64) as usize).collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
    pub mode: SamplerMode,
    pub seed: u64,
    /// Also inject encoder residuals into the unconditional guidance branch.
    pub residuals_in_uncond: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 50, guidance: 3.0, mode: SamplerMode::Deterministic, seed: 0, residuals_in_uncond: false }
    }
}

/// The encoder plus the sparse conditions it reads.
#[derive(Clone, Copy, Debug)]
pub struct Control<'a, T> {
    pub encoder: &'a EncoderWeights<T>,
    pub bundle: &'a ConditionBundle<T>,
}

/// Generates one video from Gaussian noise seeded by `cfg.seed`.
pub fn sample_video<T: Real>(
    backbone: &BackboneWeights<T>,
    control: Option<Control<'_, T>>,
    prompt: &[TokenId],
    sched: &DiffusionSchedule,
    cfg: &SampleConfig,
) -> Result<VideoTensor<T>> {
    let arch = backbone.config();
    let steps = timestep_sequence(sched.steps(), cfg.steps)?;
    ensure!(cfg.guidance.is_finite(), "guidance weight must be finite");
    let text = embed_text(prompt, backbone)?;
    let null = null_embedding(backbone);
    let input = match control {
        Some(c) => {
            ensure!(c.encoder.config() == arch, "encoder architecture differs from the backbone");
            ensure!(
                c.bundle.modality() == c.encoder.modality(),
                "bundle modality {} does not match the {} encoder",
                c.bundle.modality().name(),
                c.encoder.modality().name()
            );
            let x = build_encoder_input(c.bundle);
            ensure!(x.shape()[0] == arch.frames, "bundle has {} frames, backbone {}", x.shape()[0], arch.frames);
            Some(x)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z: Tensor<T> = standard_normal(&arch.video_shape(), &mut rng);
    let need_uncond = cfg.guidance != 1.0;
    for (i, &t) in steps.iter().enumerate() {
        let residuals = match (control, &input) {
            (Some(c), Some(x)) => Some(step_residuals(c.encoder, x, &z, t, &text)?),
            _ => None,
        };
        let eps_c = backbone_forward(&z, t, &text, backbone, residuals.as_ref())?;
        let eps = if need_uncond {
            let r_u = if cfg.residuals_in_uncond { residuals.as_ref() } else { None };
            let eps_u = backbone_forward(&z, t, &null, backbone, r_u)?;
            cfg_combine(&eps_u, &eps_c, cfg.guidance)?
        } else {
            eps_c
        };
        z = denoise_step(&z, &eps, t, steps.get(i + 1).copied(), sched, cfg.mode, &mut rng)?;
    }
    Ok(z)
}

/// Encoder residuals at one sampler state. `z` is the current noisy sample; variants
/// that do not read it ignore it.
pub fn step_residuals<T: Real>(
    enc: &EncoderWeights<T>,
    input: &Tensor<T>,
    z: &VideoTensor<T>,
    t: usize,
    text: &TextEmbedding<T>,
) -> Result<ResidualStack<T>> {
    let v = enc.variant();
    encoder_forward(input, v.reads_noisy_sample().then_some(z), t, text, enc, v)
}
