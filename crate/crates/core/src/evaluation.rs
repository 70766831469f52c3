//! Keyframe depth error after affine realignment, cross-frame consistency,
//! first-frame fidelity and the keyframe sparsity sweep.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::BackboneWeights;
use crate::dataset::{VideoRecord, BACKGROUND_DEPTH, BACKGROUND_RGB, DEFAULT_SKETCH_THRESHOLD, PALETTE};
use crate::diffusion::{standard_normal, DiffusionSchedule, VideoTensor};
use crate::encoder::{ConditionBundle, EncoderWeights};
use crate::error::{ensure, Error, Result};
use crate::real::Real;
use crate::sampling::{sample_video, Control, SampleConfig, SamplerMode};
use crate::tensor::Tensor;

/// Masking ratios of the standard sweep.
pub const STANDARD_R_MASKS: [f64; 4] = [0.0, 0.5, 0.75, 0.875];

/// Distance in `[0,1]` RGB beyond which a pixel counts as off-palette.
pub const OFF_PALETTE_DISTANCE: f64 = 0.25;

/// Keeps `k = (1 − r_mask)·n` frames on a uniform stride from frame 0.
pub fn evenly_spaced_keyframes(n: usize, r_mask: f64) -> Result<Vec<usize>> {
    ensure!((0.0..1.0).contains(&r_mask), "r_mask must be in [0, 1), got {r_mask}");
    let kf = (1.0 - r_mask) * n as f64;
    let k = libm::round(kf);
    ensure!(k >= 1.0 && (kf - k).abs() < 1e-9, "(1 - {r_mask})·{n} = {kf} is not a positive integer");
    let k = k as usize;
    Ok((0..k).map(|j| libm::round((j * n) as f64 / k as f64) as usize).collect())
}

/// Least-squares `(s, b)` minimizing `Σ (s·pred + b − gt)²`.
pub fn scale_shift_align(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    ensure!(pred.len() == gt.len(), "length mismatch {} vs {}", pred.len(), gt.len());
    ensure!(pred.len() >= 2, "need at least two elements");
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gt.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        sxx += (p - mp) * (p - mp);
        sxy += (p - mp) * (g - mg);
    }
    if sxx <= 1e-12 * n * (1.0 + mp * mp) {
        return Err(Error::Degenerate("constant prediction has no scale to fit".into()));
    }
    let s = sxy / sxx;
    Ok((s, mg - s * mp))
}

/// Per-pixel depth of the nearest palette colour (background included) for one
/// `[3, H, W]` frame in `[-1, 1]`, plus the number of pixels farther than
/// [`OFF_PALETTE_DISTANCE`] from every palette colour.
pub fn depth_proxy<T: Real>(rgb_frame: &[T], plane: usize) -> (Vec<f64>, usize) {
    let mut depth = Vec::with_capacity(plane);
    let mut off = 0;
    let colors = PALETTE.iter().map(|p| (p.rgb, p.depth)).chain(core::iter::once((BACKGROUND_RGB, BACKGROUND_DEPTH)));
    let colors: Vec<([f64; 3], f64)> = colors.collect();
    for i in 0..plane {
        let px = [0, 1, 2].map(|c| (rgb_frame[c * plane + i].as_f64() + 1.0) / 2.0);
        let mut best = (f64::INFINITY, BACKGROUND_DEPTH);
        for &(rgb, d) in &colors {
            let dist = (0..3).map(|c| (px[c] - rgb[c]) * (px[c] - rgb[c])).sum::<f64>();
            if dist < best.0 {
                best = (dist, d);
            }
        }
        if best.0.sqrt() > OFF_PALETTE_DISTANCE {
            off += 1;
        }
        depth.push(best.1);
    }
    (depth, off)
}

/// Mean absolute error ×100 between realigned `proxy` and `gt` at each keyframe.
/// Both are `[N, 1, H, W]`. A constant proxy frame is fitted by its best constant,
/// the ground-truth mean.
pub fn depth_mae_from_proxy(proxy: &Tensor<f64>, gt: &Tensor<f64>, keyframes: &[usize]) -> Result<f64> {
    ensure!(!keyframes.is_empty(), "no keyframes to evaluate");
    ensure!(proxy.shape() == gt.shape(), "proxy {:?} vs depth {:?}", proxy.shape(), gt.shape());
    let n = gt.shape()[0];
    let mut total = 0.0;
    let mut count = 0usize;
    for &k in keyframes {
        ensure!(k < n, "keyframe {k} out of range for {n} frames");
        let (p, g) = (proxy.slab(k), gt.slab(k));
        let (s, b) = match scale_shift_align(p, g) {
            Ok(sb) => sb,
            Err(Error::Degenerate(_)) => (0.0, g.iter().sum::<f64>() / g.len() as f64),
            Err(e) => return Err(e),
        };
        for (&x, &y) in p.iter().zip(g) {
            total += (s * x + b - y).abs();
        }
        count += g.len();
    }
    Ok(100.0 * total / count as f64)
}

/// Depth proxy of every frame of a generated `[N, 3, H, W]` video, and the
/// off-palette pixel fraction over `frames`.
pub fn video_depth_proxy<T: Real>(video: &VideoTensor<T>, frames: &[usize]) -> Result<(Tensor<f64>, f64)> {
    ensure!(video.rank() == 4 && video.shape()[1] == 3, "expected an RGB video, got {:?}", video.shape());
    let (n, _, h, w) = video.dims4();
    let mut out = Tensor::zeros(&[n, 1, h, w]);
    let mut off = 0;
    for i in 0..n {
        let (d, o) = depth_proxy(video.slab(i), h * w);
        out.slab_mut(i).copy_from_slice(&d);
        if frames.contains(&i) {
            off += o;
        }
    }
    let denom = (frames.len() * h * w).max(1);
    Ok((out, off as f64 / denom as f64))
}

/// Keyframe depth MAE ×100 of a generated RGB video against ground-truth depth `[N,1,H,W]`.
pub fn keyframe_depth_mae<T: Real>(generated: &VideoTensor<T>, gt_depth: &Tensor<T>, keyframes: &[usize]) -> Result<f64> {
    ensure!(!keyframes.is_empty(), "no keyframes to evaluate");
    let (proxy, _) = video_depth_proxy(generated, keyframes)?;
    depth_mae_from_proxy(&proxy, &gt_depth.cast(), keyframes)
}

fn projection(dim: usize, input: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    standard_normal(&[dim, input], &mut rng)
}

/// Seeded random-projection features, centred to zero mean per vector.
pub fn frame_features<T: Real>(video: &VideoTensor<T>, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    ensure!(video.rank() == 4, "expected [N, C, H, W]");
    ensure!(dim >= 2, "feature dimension must be at least 2");
    let n = video.shape()[0];
    let len = video.len() / n.max(1);
    let p = projection(dim, len, seed);
    let frames: Vec<Vec<f64>> = (0..n).map(|i| video.slab(i).iter().map(|x| x.as_f64()).collect()).collect();
    Ok(frames
        .iter()
        .map(|x| {
            let mut f: Vec<f64> = (0..dim).map(|r| crate::kernels::dot(p.slab(r), x)).collect();
            let mean = f.iter().sum::<f64>() / dim as f64;
            f.iter_mut().for_each(|v| *v -= mean);
            f
        })
        .collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Mean cosine similarity ×100 between features of consecutive frames.
pub fn cross_frame_consistency<T: Real>(video: &VideoTensor<T>, dim: usize, seed: u64) -> Result<f64> {
    ensure!(video.rank() == 4 && video.shape()[0] >= 2, "need at least two frames");
    let f = frame_features(video, dim, seed)?;
    let sum: f64 = f.windows(2).map(|w| cosine(&w[0], &w[1])).sum();
    Ok(100.0 * sum / (f.len() - 1) as f64)
}

/// Mean absolute pixel difference between two frames.
pub fn first_frame_fidelity<T: Real>(generated: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    ensure!(generated.shape() == reference.shape(), "shape mismatch {:?} vs {:?}", generated.shape(), reference.shape());
    ensure!(!generated.is_empty(), "empty frames");
    let s: f64 = generated.data().iter().zip(reference.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum();
    Ok(s / generated.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalConfig {
    pub r_masks: Vec<f64>,
    pub feature_dim: usize,
    pub feature_seed: u64,
    /// Sampling seeds; every video is sampled once per seed.
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub guidance: f64,
    pub mode: SamplerMode,
    pub sketch_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            r_masks: STANDARD_R_MASKS.to_vec(),
            feature_dim: 64,
            feature_seed: 0,
            seeds: alloc::vec![0],
            steps: 50,
            guidance: 3.0,
            mode: SamplerMode::Deterministic,
            sketch_threshold: DEFAULT_SKETCH_THRESHOLD,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.r_masks.is_empty() {
            return bad("r_mask list is empty".into());
        }
        if let Some(r) = self.r_masks.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return bad(format!("r_mask {r} outside [0, 1)"));
        }
        if self.seeds.is_empty() {
            return bad("no sampling seeds".into());
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2".into());
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        Ok(())
    }

    /// Canonical text form hashed into report digests.
    pub fn canonical(&self) -> String {
        format!(
            "r_masks={:?};feature_dim={};feature_seed={};seeds={:?};steps={};guidance={:?};mode={};sketch_threshold={:?}",
            self.r_masks,
            self.feature_dim,
            self.feature_seed,
            self.seeds,
            self.steps,
            self.guidance,
            self.mode.name(),
            self.sketch_threshold
        )
    }
}

/// One aggregate row of a sweep.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRow {
    pub variant: String,
    pub r_mask: f64,
    pub keyframes: Vec<usize>,
    /// Depth MAE ×100 over every frame, conditioned or not.
    pub mae_x100: f64,
    /// Depth MAE ×100 over the conditioned frames only.
    pub keyframe_mae_x100: f64,
    pub consistency_x100: f64,
    pub off_palette_fraction: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// Hex SHA-256 over the evaluation config, every weight digest and the eval data.
    pub config_digest: String,
}

impl MetricsReport {
    pub fn row(&self, variant: &str, r_mask: f64) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.variant == variant && (r.r_mask - r_mask).abs() < 1e-12)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if r.samples == 0 || !(r.mae_x100.is_finite() && r.keyframe_mae_x100.is_finite() && r.consistency_x100.is_finite() && r.off_palette_fraction.is_finite()) {
                return Err(Error::Degenerate(format!("row {} r_mask {} is not finite or empty", r.variant, r.r_mask)));
            }
        }
        Ok(())
    }
}

/// A model under evaluation; `encoder: None` means the bare backbone.
#[derive(Clone, Copy, Debug)]
pub struct SweepModel<'a, T> {
    pub label: &'a str,
    pub encoder: Option<&'a EncoderWeights<T>>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of everything a sweep result depends on.
pub fn sweep_digest<T: Real>(
    backbone: &BackboneWeights<T>,
    models: &[SweepModel<'_, T>],
    data: &[VideoRecord<T>],
    sched: &DiffusionSchedule,
    cfg: &EvalConfig,
) -> String {
    let mut h = Sha256::new();
    h.update(cfg.canonical().as_bytes());
    h.update(backbone.digest());
    for m in models {
        h.update(m.label.as_bytes());
        h.update([0u8]);
        match m.encoder {
            Some(e) => {
                h.update(e.variant().name().as_bytes());
                h.update(e.modality().name().as_bytes());
                h.update(e.digest());
            }
            None => h.update(b"backbone-only"),
        }
    }
    for a in sched.alphas() {
        h.update(a.to_le_bytes());
    }
    for r in data {
        h.update(r.spec.seed.to_le_bytes());
        for x in r.rgb.data() {
            h.update(x.as_f32().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Samples every eval video at every masking ratio for every model and aggregates
/// keyframe depth MAE and consistency.
pub fn run_sparsity_sweep<T: Real>(
    backbone: &BackboneWeights<T>,
    models: &[SweepModel<'_, T>],
    data: &[VideoRecord<T>],
    sched: &DiffusionSchedule,
    cfg: &EvalConfig,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<MetricsReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    if models.is_empty() {
        return Err(Error::Config("no models to evaluate".into()));
    }
    let arch = backbone.config();
    for m in models {
        if let Some(e) = m.encoder {
            if e.config() != arch {
                return Err(Error::Config(format!("{}: encoder architecture differs from the backbone", m.label)));
            }
        }
    }
    if let Some((i, _)) = data.iter().enumerate().find(|(_, r)| r.rgb.shape() != arch.video_shape()) {
        return Err(Error::Config(format!("eval record {i} does not match the backbone video shape")));
    }
    let n = arch.frames;
    let mut rows = Vec::new();
    for m in models {
        for &r in &cfg.r_masks {
            let keys = evenly_spaced_keyframes(n, r).map_err(|e| Error::Config(format!("{e}")))?;
            let all: Vec<usize> = (0..n).collect();
            let (mut mae, mut kmae, mut cons, mut off, mut count) = (0.0, 0.0, 0.0, 0.0, 0usize);
            for rec in data {
                let bundle = match m.encoder {
                    Some(e) => Some(ConditionBundle::from_dense(&rec.conditions(e.modality(), cfg.sketch_threshold), &keys, e.modality())?),
                    None => None,
                };
                for &seed in &cfg.seeds {
                    let control = m.encoder.zip(bundle.as_ref()).map(|(encoder, bundle)| Control { encoder, bundle });
                    let sc = SampleConfig { steps: cfg.steps, guidance: cfg.guidance, mode: cfg.mode, seed, residuals_in_uncond: false };
                    let video = sample_video(backbone, control, &rec.spec.prompt, sched, &sc)?;
                    let (proxy, o) = video_depth_proxy(&video, &all)?;
                    let gt = rec.depth.cast();
                    mae += depth_mae_from_proxy(&proxy, &gt, &all)?;
                    kmae += depth_mae_from_proxy(&proxy, &gt, &keys)?;
                    cons += cross_frame_consistency(&video, cfg.feature_dim, cfg.feature_seed)?;
                    off += o;
                    count += 1;
                }
            }
            let c = count as f64;
            let row = MetricsRow {
                variant: m.label.into(),
                r_mask: r,
                keyframes: keys,
                mae_x100: mae / c,
                keyframe_mae_x100: kmae / c,
                consistency_x100: cons / c,
                off_palette_fraction: off / c,
                samples: count,
            };
            progress(&row);
            rows.push(row);
        }
    }
    let report = MetricsReport { rows, config_digest: sweep_digest(backbone, models, data, sched, cfg) };
    report.validate()?;
    Ok(report)
}
