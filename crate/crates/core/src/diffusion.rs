//! Variance-preserving noise schedule, forward noising and the ε-prediction loss.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A video tensor `[frames, channels, height, width]`, scaled to `[-1, 1]` for training data.
pub type VideoTensor<T> = Tensor<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ScheduleKind {
    #[cfg_attr(feature = "serde", serde(rename = "linear-vp"))]
    LinearVp,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-vp" => Ok(Self::LinearVp),
            other => Err(Error::Config(format!("unsupported schedule kind `{other}`"))),
        }
    }
}

impl core::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::LinearVp => "linear-vp",
        })
    }
}

/// Signal and noise coefficients per step: `z_t = alpha[t]·z_0 + sigma[t]·ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

const BETA_START: f64 = 1e-4;
const BETA_END_AT_1000: f64 = 0.02;

impl DiffusionSchedule {
    /// Builds a schedule of `steps` steps.
    ///
    /// `linear-vp` uses per-step retention factors `1 - β_i` with `β` linear from
    /// `1e-4` to `0.02·1000/steps` (capped at `0.999`), which is the usual DDPM
    /// schedule at 1000 steps and keeps the terminal signal level near zero for
    /// shorter schedules.
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        ensure!(steps >= 2, "schedule needs at least 2 steps, got {steps}");
        match kind {
            ScheduleKind::LinearVp => {
                let beta_end = (BETA_END_AT_1000 * 1000.0 / steps as f64).min(0.999);
                let mut log_keep = 0.0f64;
                let mut alpha = Vec::with_capacity(steps);
                let mut sigma = Vec::with_capacity(steps);
                for i in 0..steps {
                    let beta = BETA_START + (beta_end - BETA_START) * i as f64 / (steps - 1) as f64;
                    log_keep += libm::log1p(-beta);
                    alpha.push(libm::exp(0.5 * log_keep));
                    sigma.push(libm::sqrt(-libm::expm1(log_keep)));
                }
                Ok(Self { alpha, sigma })
            }
        }
    }

    /// Parses `kind` and builds the schedule.
    pub fn make(steps: usize, kind: &str) -> Result<Self> {
        Self::new(steps, kind.parse()?)
    }

    /// Schedule from explicit coefficients. Checks the variance-preserving identity
    /// and strict monotonicity but not the endpoint levels.
    pub fn from_parts(alpha: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        ensure!(alpha.len() == sigma.len() && alpha.len() >= 2, "alpha/sigma lengths");
        for (t, (&a, &s)) in alpha.iter().zip(&sigma).enumerate() {
            ensure!((a * a + s * s - 1.0).abs() <= 1e-6, "alpha²+sigma² != 1 at step {t}");
        }
        ensure!(alpha.windows(2).all(|w| w[1] < w[0]), "alpha must strictly decrease");
        Ok(Self { alpha, sigma })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        ensure!(t < self.steps(), "step {t} out of range for {} steps", self.steps());
        Ok(())
    }
}

/// `alpha[t]·z0 + sigma[t]·eps`
pub fn add_noise<T: Real>(
    z0: &VideoTensor<T>,
    eps: &VideoTensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<VideoTensor<T>> {
    sched.check_step(t)?;
    ensure!(z0.shape() == eps.shape(), "z0 {:?} vs eps {:?}", z0.shape(), eps.shape());
    let (a, s) = (T::lit(sched.alpha(t)), T::lit(sched.sigma(t)));
    z0.zip_map(eps, |x, e| a * x + s * e)
}

/// Tensor of independent standard normal draws.
pub fn standard_normal<T: Real, R: rand::Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(rand_distr::StandardNormal)))
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss<T: Real>(eps_pred: &VideoTensor<T>, eps: &VideoTensor<T>) -> Result<T> {
    ensure!(eps_pred.shape() == eps.shape(), "shape mismatch {:?} vs {:?}", eps_pred.shape(), eps.shape());
    ensure!(!eps.is_empty(), "empty tensors");
    let sum: T = eps_pred.data().iter().zip(eps.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(sum / T::from_usize(eps.len()).unwrap())
}
