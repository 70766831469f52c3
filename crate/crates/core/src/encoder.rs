//! Sparse condition encoder: a trainable copy of the backbone's encoder half that
//! reads per-frame condition maps plus a mask channel and emits one residual per
//! backbone injection site through zero-initialized 1×1 projections.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::{ArchConfig, BackboneWeights, EncoderHalf, ResidualStack, TextEmbedding};
use crate::dataset::Modality;
use crate::diffusion::VideoTensor;
use crate::error::{ensure, Error, Result};
use crate::layers::{Conv, TemporalAttention};
use crate::params::{Bound, Init, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Initial scale of encoder temporal attention weights.
pub const TEMPORAL_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EncoderVariant {
    /// No temporal layers; reads `z_t` like a per-frame adapter.
    FrameWise,
    /// Temporal layers, still reads `z_t`.
    #[cfg_attr(feature = "serde", serde(rename = "temporal_noise"))]
    TemporalWithNoise,
    /// Temporal layers, conditions only.
    Full,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 3] = [Self::FrameWise, Self::TemporalWithNoise, Self::Full];

    pub fn has_temporal(self) -> bool {
        !matches!(self, Self::FrameWise)
    }

    pub fn reads_noisy_sample(self) -> bool {
        !matches!(self, Self::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FrameWise => "frame_wise",
            Self::TemporalWithNoise => "temporal_noise",
            Self::Full => "full",
        }
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoder variant {s:?} (expected frame_wise, temporal_noise or full)")))
    }
}

/// Sparse per-frame conditions and their mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle<T> {
    conditions: Tensor<T>,
    mask: Tensor<T>,
    keyframes: Vec<usize>,
    modality: Modality,
}

impl<T: Real> ConditionBundle<T> {
    /// Keeps the maps of `keyframes` from the dense `[N, C_cond, H, W]` stack and zeroes the rest.
    pub fn from_dense(dense: &Tensor<T>, keyframes: &[usize], modality: Modality) -> Result<Self> {
        ensure!(dense.rank() == 4, "conditions must be rank 4, got {:?}", dense.shape());
        let (n, c, h, w) = dense.dims4();
        ensure!(c == modality.channels(), "{} conditions need {} channels, got {c}", modality.name(), modality.channels());
        let keys = normalize_keyframes(keyframes, n)?;
        let mut conditions = Tensor::zeros(dense.shape());
        let mut mask = Tensor::zeros(&[n, 1, h, w]);
        for &k in &keys {
            conditions.slab_mut(k).copy_from_slice(dense.slab(k));
            mask.slab_mut(k).fill(T::one());
        }
        Ok(Self { conditions, mask, keyframes: keys, modality })
    }

    /// Builds from per-keyframe maps `[C_cond, H, W]`, one per entry of `keyframes`.
    pub fn from_keyframes(frames: usize, keyframes: &[usize], maps: &[Tensor<T>], modality: Modality) -> Result<Self> {
        ensure!(keyframes.len() == maps.len(), "{} keyframes but {} maps", keyframes.len(), maps.len());
        let Some(first) = maps.first() else {
            return Err(Error::Argument("from_keyframes needs at least one map; use ConditionBundle::empty".into()));
        };
        ensure!(first.rank() == 3, "condition maps must be [C, H, W], got {:?}", first.shape());
        let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
        let mut dense = Tensor::zeros(&[frames, c, h, w]);
        for (&k, m) in keyframes.iter().zip(maps) {
            ensure!(m.shape() == first.shape(), "condition map shapes differ: {:?} vs {:?}", m.shape(), first.shape());
            ensure!(k < frames, "keyframe {k} out of range for {frames} frames");
            dense.slab_mut(k).copy_from_slice(m.data());
        }
        Self::from_dense(&dense, keyframes, modality)
    }

    /// No conditioned frames; the encoder then sees an all-zero input.
    pub fn empty(frames: usize, height: usize, width: usize, modality: Modality) -> Self {
        Self {
            conditions: Tensor::zeros(&[frames, modality.channels(), height, width]),
            mask: Tensor::zeros(&[frames, 1, height, width]),
            keyframes: Vec::new(),
            modality,
        }
    }

    /// Checks the mask/keyframe/zero-placeholder relations.
    pub fn from_parts(conditions: Tensor<T>, mask: Tensor<T>, keyframes: Vec<usize>, modality: Modality) -> Result<Self> {
        ensure!(conditions.rank() == 4, "conditions must be rank 4");
        let (n, c, h, w) = conditions.dims4();
        ensure!(c == modality.channels(), "{} conditions need {} channels, got {c}", modality.name(), modality.channels());
        ensure!(mask.shape() == [n, 1, h, w], "mask shape {:?}, expected {:?}", mask.shape(), [n, 1, h, w]);
        ensure!(keyframes.windows(2).all(|p| p[0] < p[1]), "keyframes must be sorted and distinct");
        ensure!(keyframes.iter().all(|&k| k < n), "keyframe out of range");
        for i in 0..n {
            let on = keyframes.binary_search(&i).is_ok();
            let want = if on { T::one() } else { T::zero() };
            ensure!(mask.slab(i).iter().all(|&m| m == want), "mask of frame {i} must be all {}", if on { 1 } else { 0 });
            if !on {
                ensure!(conditions.slab(i).iter().all(|&x| x == T::zero()), "unconditioned frame {i} carries condition content");
            }
        }
        Ok(Self { conditions, mask, keyframes, modality })
    }

    pub fn conditions(&self) -> &Tensor<T> {
        &self.conditions
    }

    pub fn mask(&self) -> &Tensor<T> {
        &self.mask
    }

    pub fn keyframes(&self) -> &[usize] {
        &self.keyframes
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn frames(&self) -> usize {
        self.conditions.shape()[0]
    }
}

fn normalize_keyframes(keyframes: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut keys = keyframes.to_vec();
    keys.sort_unstable();
    keys.dedup();
    ensure!(keys.len() == keyframes.len(), "duplicate keyframe in {keyframes:?}");
    if let Some(&bad) = keys.iter().find(|&&k| k >= n) {
        return Err(Error::Argument(format!("keyframe {bad} out of range for {n} frames")));
    }
    Ok(keys)
}

/// `[N, C_cond + 1, H, W]`: condition channels followed by the mask channel.
pub fn build_encoder_input<T: Real>(bundle: &ConditionBundle<T>) -> Tensor<T> {
    let (n, c, h, w) = bundle.conditions.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c + 1, h, w]);
    for i in 0..n {
        let dst = out.slab_mut(i);
        dst[..c * plane].copy_from_slice(bundle.conditions.slab(i));
        dst[c * plane..].copy_from_slice(bundle.mask.slab(i));
    }
    out
}

#[derive(Clone, Debug)]
struct EncoderNet {
    conv_in: Conv,
    half: EncoderHalf,
    temporal: Option<[TemporalAttention; 2]>,
    zero: [Conv; 3],
}

/// Encoder parameters, tagged with the variant and modality they were built for.
#[derive(Clone, Debug)]
pub struct EncoderWeights<T> {
    cfg: ArchConfig,
    variant: EncoderVariant,
    modality: Modality,
    params: ParamStore<T>,
    net: EncoderNet,
}

impl<T: Real> EncoderWeights<T> {
    /// Randomly initialized copy of the backbone encoder layout; projections are zero.
    pub fn new<R: Rng + ?Sized>(cfg: ArchConfig, variant: EncoderVariant, modality: Modality, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let [c0, c1] = cfg.widths;
        let cin = modality.channels() + 1 + if variant.reads_noisy_sample() { cfg.channels } else { 0 };
        let mut ps = ParamStore::new();
        let conv_in = Conv::new(&mut ps, "conv_in", cin, c0, 3, 1, Init::FanIn(1.0), rng);
        let half = EncoderHalf::new(&mut ps, &cfg, rng);
        let temporal = variant.has_temporal().then(|| {
            [
                TemporalAttention::new(&mut ps, "enc0.temporal", c0, TEMPORAL_INIT_SCALE, rng),
                TemporalAttention::new(&mut ps, "enc1.temporal", c1, TEMPORAL_INIT_SCALE, rng),
            ]
        });
        let zero = [
            Conv::new(&mut ps, "zero0", c0, c0, 1, 1, Init::Zero, rng),
            Conv::new(&mut ps, "zero1", c1, c1, 1, 1, Init::Zero, rng),
            Conv::new(&mut ps, "zero_mid", c1, c1, 1, 1, Init::Zero, rng),
        ];
        Ok(Self { cfg, variant, modality, params: ps, net: EncoderNet { conv_in, half, temporal, zero } })
    }

    /// Copies the backbone's encoder half. For variants that read `z_t`, the sample
    /// channels of the input convolution are copied too and only the condition and
    /// mask channels start random.
    pub fn from_backbone<R: Rng + ?Sized>(
        backbone: &BackboneWeights<T>,
        variant: EncoderVariant,
        modality: Modality,
        rng: &mut R,
    ) -> Result<Self> {
        let mut enc = Self::new(backbone.config().clone(), variant, modality, rng)?;
        const COPIED: [&str; 6] = ["time.", "down0.res.", "down.", "down1.res.", "mid.res.", "mid.cross."];
        for p in backbone.params().iter() {
            if COPIED.iter().any(|pre| p.name.starts_with(pre)) {
                let dst = enc.params.by_name_mut(&p.name).expect("encoder half mirrors backbone names");
                *dst = p.value.clone();
            }
        }
        if variant.reads_noisy_sample() {
            let c = backbone.config().channels;
            let src_w = backbone.params().by_name("conv_in.w").expect("backbone input conv");
            let src_b = backbone.params().by_name("conv_in.b").expect("backbone input conv").clone();
            let (cout, _, k, _) = src_w.dims4();
            let src_w = src_w.clone();
            let dst_w = enc.params.by_name_mut("conv_in.w").expect("encoder input conv");
            let wide = dst_w.shape()[1];
            for o in 0..cout {
                for i in 0..c {
                    let s = &src_w.data()[(o * c + i) * k * k..(o * c + i + 1) * k * k];
                    dst_w.data_mut()[(o * wide + i) * k * k..(o * wide + i + 1) * k * k].copy_from_slice(s);
                }
            }
            *enc.params.by_name_mut("conv_in.b").expect("encoder input conv") = src_b;
        }
        Ok(enc)
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn from_params(cfg: ArchConfig, variant: EncoderVariant, modality: Modality, params: ParamStore<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut w = Self::new(cfg, variant, modality, &mut rng)?;
        if !w.params.same_layout(&params) {
            return Err(Error::Config(format!("parameter layout does not match a {variant} encoder for {}", modality.name())));
        }
        w.params = params;
        Ok(w)
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn variant(&self) -> EncoderVariant {
        self.variant
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn digest(&self) -> [u8; 32] {
        self.params.digest()
    }

    /// Noise-fills every parameter; the projections stop being zero.
    pub fn randomize<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        self.params.randomize(scale, rng);
    }

    /// True while every output projection is exactly zero.
    pub fn projections_are_zero(&self) -> bool {
        self.net
            .zero
            .iter()
            .flat_map(|c| c.params())
            .all(|id| self.params.get(id).data().iter().all(|&x| x == T::zero()))
    }

    pub(crate) fn check_inputs(&self, input: &Tensor<T>, z_t: Option<&VideoTensor<T>>, variant: EncoderVariant) -> Result<()> {
        ensure!(variant == self.variant, "weights are a {} encoder, called as {variant}", self.variant);
        let [n, c, h, w] = self.cfg.video_shape();
        let want = [n, self.modality.channels() + 1, h, w];
        ensure!(input.shape() == want, "encoder input shape {:?}, expected {:?}", input.shape(), want);
        match (variant.reads_noisy_sample(), z_t) {
            (true, None) => return Err(Error::Argument(format!("{variant} encoder needs z_t"))),
            (false, Some(_)) => return Err(Error::Argument(format!("{variant} encoder does not take z_t"))),
            (true, Some(z)) => ensure!(z.shape() == [n, c, h, w], "z_t shape {:?}, expected {:?}", z.shape(), [n, c, h, w]),
            (false, None) => {}
        }
        Ok(())
    }

    /// Residual variables inside an existing graph. `z` must be `Some` exactly when
    /// the variant reads the noisy sample.
    pub(crate) fn forward_in(&self, g: &mut Graph<T>, p: &Bound, input: Var, z: Option<Var>, t: usize, text: Var) -> [Var; 3] {
        let n = &self.net;
        let temb = n.half.time.forward(g, p, t);
        let x = match z {
            Some(z) => g.concat_channels(z, input),
            None => input,
        };
        let h = n.conv_in.forward(g, p, x);
        let mut h = n.half.res0.forward(g, p, h, temb);
        if let Some(ta) = &n.temporal {
            h = ta[0].forward(g, p, h);
        }
        let r0 = n.zero[0].forward(g, p, h);
        let h = n.half.down.forward(g, p, h);
        let mut h = n.half.res1.forward(g, p, h, temb);
        if let Some(ta) = &n.temporal {
            h = ta[1].forward(g, p, h);
        }
        let r1 = n.zero[1].forward(g, p, h);
        let h = n.half.mid.forward(g, p, h, temb);
        let h = n.half.cross.forward(g, p, h, text);
        let r2 = n.zero[2].forward(g, p, h);
        [r0, r1, r2]
    }
}

/// Residuals for the backbone injection sites.
pub fn encoder_forward<T: Real>(
    input: &Tensor<T>,
    z_t: Option<&VideoTensor<T>>,
    t: usize,
    text: &TextEmbedding<T>,
    weights: &EncoderWeights<T>,
    variant: EncoderVariant,
) -> Result<ResidualStack<T>> {
    weights.check_inputs(input, z_t, variant)?;
    let ts = text.vectors.shape();
    ensure!(ts.len() == 2 && ts[0] >= 1 && ts[1] == weights.cfg.text_dim, "text embedding shape {:?}", ts);
    let mut g = Graph::new();
    let p = weights.params.bind(&mut g, false);
    let x = g.constant(input.clone());
    let z = z_t.map(|z| g.constant(z.clone()));
    let txt = g.constant(text.vectors.clone());
    let out = weights.forward_in(&mut g, &p, x, z, t, txt);
    Ok(ResidualStack { residuals: out.iter().map(|&v| g.value(v).clone()).collect() })
}

/// Context for [`propagation_reach`]: the step, text and, for variants that read it, `z_t`.
#[derive(Clone, Debug)]
pub struct ProbeContext<T> {
    pub t: usize,
    pub text: TextEmbedding<T>,
    pub z_t: Option<VideoTensor<T>>,
}

/// Per-frame flag: does perturbing the single keyframe's condition move that frame's
/// residuals by more than 1e-9?
pub fn propagation_reach<T: Real>(
    weights: &EncoderWeights<T>,
    variant: EncoderVariant,
    probe: &ConditionBundle<T>,
    ctx: &ProbeContext<T>,
) -> Result<Vec<bool>> {
    ensure!(probe.keyframes.len() == 1, "probe needs exactly one keyframe, got {}", probe.keyframes.len());
    let k = probe.keyframes[0];
    let base_in = build_encoder_input(probe);
    let mut moved = probe.conditions.clone();
    for (j, x) in moved.slab_mut(k).iter_mut().enumerate() {
        *x += T::lit(0.25 + 0.5 * ((j * 7919) % 13) as f64 / 13.0);
    }
    let perturbed = ConditionBundle { conditions: moved, ..probe.clone() };
    let pert_in = build_encoder_input(&perturbed);
    let a = encoder_forward(&base_in, ctx.z_t.as_ref(), ctx.t, &ctx.text, weights, variant)?;
    let b = encoder_forward(&pert_in, ctx.z_t.as_ref(), ctx.t, &ctx.text, weights, variant)?;
    Ok(a.frame_deltas(&b).into_iter().map(|d| d > 1e-9).collect())
}

/// Human-readable influence map such as `"#..."`.
pub fn reach_string(reach: &[bool]) -> String {
    reach.iter().map(|&r| if r { '#' } else { '.' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::embed_text;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ArchConfig {
        ArchConfig { frames: 4, channels: 3, height: 8, width: 8, widths: [4, 8], groups: 2, time_dim: 8, text_dim: 6, attn_dim: 4, ..ArchConfig::default() }
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn setup(variant: EncoderVariant, random: bool) -> (BackboneWeights<f64>, EncoderWeights<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut bb = BackboneWeights::new(cfg(), &mut rng).unwrap();
        bb.randomize(1.0, &mut rng);
        let mut enc = EncoderWeights::from_backbone(&bb, variant, Modality::Depth, &mut rng).unwrap();
        if random {
            enc.randomize(1.0, &mut rng);
        }
        (bb, enc)
    }

    fn z_for(v: EncoderVariant, seed: u64) -> Option<Tensor<f64>> {
        v.reads_noisy_sample().then(|| noise(&cfg().video_shape(), seed))
    }

    #[test]
    fn variant_names_round_trip() {
        for v in EncoderVariant::ALL {
            assert_eq!(v.name().parse::<EncoderVariant>().unwrap(), v);
        }
        assert!(matches!("controlnet".parse::<EncoderVariant>(), Err(Error::Config(_))));
    }

    #[test]
    fn input_examples() {
        let dense = noise(&[4, 1, 8, 8], 1);
        let empty = ConditionBundle::<f64>::empty(4, 8, 8, Modality::Depth);
        assert!(build_encoder_input(&empty).data().iter().all(|&x| x == 0.0));

        let all = ConditionBundle::from_dense(&dense, &[0, 1, 2, 3], Modality::Depth).unwrap();
        let x = build_encoder_input(&all);
        assert_eq!(x.shape(), &[4, 2, 8, 8]);
        for i in 0..4 {
            assert!(x.slab(i)[64..].iter().all(|&m| m == 1.0));
            assert_eq!(&x.slab(i)[..64], dense.slab(i));
        }

        let one = ConditionBundle::from_dense(&dense, &[2], Modality::Depth).unwrap();
        let x = build_encoder_input(&one);
        for i in [0, 1, 3] {
            assert!(x.slab(i).iter().all(|&v| v == 0.0));
        }
        assert_eq!(&x.slab(2)[..64], dense.slab(2));
        assert!(x.slab(2)[64..].iter().all(|&m| m == 1.0));
    }

    #[test]
    fn bundle_invariants_are_enforced() {
        let dense = noise(&[4, 1, 8, 8], 2);
        assert!(ConditionBundle::from_dense(&dense, &[4], Modality::Depth).is_err());
        assert!(ConditionBundle::from_dense(&dense, &[1, 1], Modality::Depth).is_err());
        assert!(ConditionBundle::from_dense(&dense, &[0], Modality::Rgb).is_err());
        let b = ConditionBundle::from_dense(&dense, &[3, 1], Modality::Depth).unwrap();
        assert_eq!(b.keyframes(), &[1, 3]);
        let rebuilt = ConditionBundle::from_parts(b.conditions().clone(), b.mask().clone(), b.keyframes().to_vec(), Modality::Depth).unwrap();
        assert_eq!(rebuilt, b);
        let mut bad_mask = b.mask().clone();
        bad_mask.slab_mut(0)[5] = 1.0;
        assert!(ConditionBundle::from_parts(b.conditions().clone(), bad_mask, vec![1, 3], Modality::Depth).is_err());
        assert!(ConditionBundle::from_parts(dense.clone(), b.mask().clone(), vec![1, 3], Modality::Depth).is_err());
    }

    #[test]
    fn dense_bundle_matches_per_frame_construction() {
        let dense = noise(&[4, 1, 8, 8], 3);
        let a = ConditionBundle::from_dense(&dense, &[0, 1, 2, 3], Modality::Depth).unwrap();
        let maps: Vec<_> = (0..4).map(|i| crate::dataset::frame(&dense, i)).collect();
        let b = ConditionBundle::from_keyframes(4, &[0, 1, 2, 3], &maps, Modality::Depth).unwrap();
        assert_eq!(build_encoder_input(&a), build_encoder_input(&b));
    }

    #[test]
    fn fresh_encoder_emits_zeros() {
        for v in EncoderVariant::ALL {
            let (bb, enc) = setup(v, false);
            assert!(enc.projections_are_zero());
            let b = ConditionBundle::from_dense(&noise(&[4, 1, 8, 8], 4), &[0, 2], Modality::Depth).unwrap();
            let text = embed_text(&[3, 1], &bb).unwrap();
            let r = encoder_forward(&build_encoder_input(&b), z_for(v, 5).as_ref(), 400, &text, &enc, v).unwrap();
            r.validate(bb.config()).unwrap();
            assert!(r.is_all_zero(), "{v}");
        }
    }

    #[test]
    fn backbone_half_is_copied() {
        let (bb, enc) = setup(EncoderVariant::FrameWise, false);
        for name in ["time.l1.w", "down0.res.conv1.w", "down.w", "mid.cross.k.w"] {
            if let Some(src) = bb.params().by_name(name) {
                assert_eq!(Some(src), enc.params().by_name(name), "{name}");
            }
        }
        let src = bb.params().by_name("conv_in.w").unwrap();
        let dst = enc.params().by_name("conv_in.w").unwrap();
        assert_eq!(dst.shape(), &[4, 3 + 2, 3, 3]);
        assert_eq!(&dst.data()[..27], &src.data()[..27]);
    }

    #[test]
    fn z_t_contract() {
        let b = ConditionBundle::from_dense(&noise(&[4, 1, 8, 8], 6), &[0], Modality::Depth).unwrap();
        let x = build_encoder_input(&b);
        let z = noise(&cfg().video_shape(), 7);
        for v in EncoderVariant::ALL {
            let (bb, enc) = setup(v, true);
            let text = embed_text(&[], &bb).unwrap();
            let wrong = if v.reads_noisy_sample() { None } else { Some(&z) };
            assert!(matches!(encoder_forward(&x, wrong, 10, &text, &enc, v), Err(Error::Argument(_))));
            let other = EncoderVariant::ALL.into_iter().find(|&o| o != v).unwrap();
            assert!(encoder_forward(&x, z_for(other, 1).as_ref(), 10, &text, &enc, other).is_err());
        }
        let (bb, enc) = setup(EncoderVariant::Full, true);
        let text = embed_text(&[], &bb).unwrap();
        assert!(encoder_forward(&noise(&[4, 4, 8, 8], 1), None, 10, &text, &enc, EncoderVariant::Full).is_err());
    }

    #[test]
    fn full_ignores_noisy_sample_by_construction() {
        let (bb, enc) = setup(EncoderVariant::Full, true);
        let b = ConditionBundle::from_dense(&noise(&[4, 1, 8, 8], 8), &[1], Modality::Depth).unwrap();
        let text = embed_text(&[4, 2, 9], &bb).unwrap();
        let x = build_encoder_input(&b);
        let a = encoder_forward(&x, None, 123, &text, &enc, EncoderVariant::Full).unwrap();
        let again = encoder_forward(&x, None, 123, &text, &enc, EncoderVariant::Full).unwrap();
        assert_eq!(a, again);
        assert!(!a.is_all_zero());
    }

    #[test]
    fn locality_and_propagation() {
        let probe = ConditionBundle::from_dense(&noise(&[4, 1, 8, 8], 9), &[1], Modality::Depth).unwrap();
        for (v, want) in [(EncoderVariant::FrameWise, ".#.."), (EncoderVariant::TemporalWithNoise, "####"), (EncoderVariant::Full, "####")] {
            let (bb, enc) = setup(v, true);
            let ctx = ProbeContext { t: 250, text: embed_text(&[5, 2, 10], &bb).unwrap(), z_t: z_for(v, 10) };
            let reach = propagation_reach(&enc, v, &probe, &ctx).unwrap();
            assert_eq!(reach_string(&reach), want, "{v}");
        }
    }

    #[test]
    fn frame_wise_other_frames_are_bitwise_unchanged() {
        let (bb, enc) = setup(EncoderVariant::FrameWise, true);
        let dense = noise(&[4, 1, 8, 8], 11);
        let text = embed_text(&[6], &bb).unwrap();
        let z = noise(&cfg().video_shape(), 12);
        let a = ConditionBundle::from_dense(&dense, &[0, 1, 2, 3], Modality::Depth).unwrap();
        let mut d2 = dense.clone();
        d2.slab_mut(2).iter_mut().for_each(|x| *x = -*x);
        let b = ConditionBundle::from_dense(&d2, &[0, 1, 2, 3], Modality::Depth).unwrap();
        let v = EncoderVariant::FrameWise;
        let ra = encoder_forward(&build_encoder_input(&a), Some(&z), 77, &text, &enc, v).unwrap();
        let rb = encoder_forward(&build_encoder_input(&b), Some(&z), 77, &text, &enc, v).unwrap();
        for (x, y) in ra.residuals.iter().zip(&rb.residuals) {
            for i in [0, 1, 3] {
                assert_eq!(x.slab(i), y.slab(i));
            }
            assert_ne!(x.slab(2), y.slab(2));
        }
    }

    #[test]
    fn zero_weights_reach_nowhere() {
        let probe = ConditionBundle::from_dense(&noise(&[4, 1, 8, 8], 13), &[0], Modality::Depth).unwrap();
        for v in EncoderVariant::ALL {
            let (bb, enc) = setup(v, false);
            let ctx = ProbeContext { t: 5, text: embed_text(&[], &bb).unwrap(), z_t: z_for(v, 14) };
            assert_eq!(reach_string(&propagation_reach(&enc, v, &probe, &ctx).unwrap()), "....");
        }
        let (bb, enc) = setup(EncoderVariant::Full, true);
        let two = ConditionBundle::from_dense(&noise(&[4, 1, 8, 8], 13), &[0, 1], Modality::Depth).unwrap();
        let ctx = ProbeContext { t: 5, text: embed_text(&[], &bb).unwrap(), z_t: None };
        assert!(matches!(propagation_reach(&enc, EncoderVariant::Full, &two, &ctx), Err(Error::Argument(_))));
    }

    #[test]
    fn loading_rejects_other_layouts() {
        let (bb, enc) = setup(EncoderVariant::Full, false);
        let cfg = bb.config().clone();
        assert!(EncoderWeights::from_params(cfg.clone(), EncoderVariant::Full, Modality::Depth, enc.params().clone()).is_ok());
        assert!(EncoderWeights::from_params(cfg.clone(), EncoderVariant::FrameWise, Modality::Depth, enc.params().clone()).is_err());
        assert!(EncoderWeights::from_params(cfg, EncoderVariant::Full, Modality::Rgb, enc.params().clone()).is_err());
    }
}
