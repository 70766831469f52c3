//! Toy text-conditioned video denoiser: a two-level UNet of 2-D residual blocks with
//! temporal attention after each encoder level and text cross-attention in the
//! middle block. It accepts additive residuals at the three decoder-side
//! injection sites (both skip connections and the middle block).

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::diffusion::VideoTensor;
use crate::error::{ensure, Error, Result};
use crate::layers::{Conv, CrossAttention, GroupNorm, ResBlock, TemporalAttention, TimeEmbedding};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vocab::{self, TokenId, NULL_TOKEN};

/// Architecture hyper-parameters. Parameter names and shapes are a pure function of this.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArchConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel widths of the two resolution levels.
    pub widths: [usize; 2],
    pub groups: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub attn_dim: usize,
    pub vocab_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            channels: 3,
            height: 32,
            width: 32,
            widths: [32, 64],
            groups: 8,
            time_dim: 32,
            text_dim: 32,
            attn_dim: 32,
            vocab_size: vocab::vocab_size(),
        }
    }
}

impl ArchConfig {
    /// Smallest configuration used by gradient checks.
    pub fn miniature() -> Self {
        Self {
            frames: 2,
            channels: 1,
            height: 8,
            width: 8,
            widths: [4, 8],
            groups: 2,
            time_dim: 4,
            text_dim: 4,
            attn_dim: 4,
            vocab_size: vocab::vocab_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: alloc::string::String| Err(Error::Config(m));
        let [c0, c1] = self.widths;
        if self.frames == 0 || self.channels == 0 || c0 == 0 || c1 == 0 {
            return cfg("frames, channels and widths must be positive".into());
        }
        if self.height % 2 != 0 || self.width % 2 != 0 || self.height == 0 || self.width == 0 {
            return cfg(alloc::format!("height/width must be even and positive, got {}x{}", self.height, self.width));
        }
        if self.groups == 0 || c0 % self.groups != 0 || c1 % self.groups != 0 {
            return cfg(alloc::format!("groups {} must divide widths {:?}", self.groups, self.widths));
        }
        if self.time_dim < 2 || self.text_dim == 0 || self.attn_dim == 0 {
            return cfg("time_dim >= 2, text_dim and attn_dim positive".into());
        }
        if self.vocab_size < vocab::vocab_size() {
            return cfg(alloc::format!("vocab_size must be at least {}", vocab::vocab_size()));
        }
        Ok(())
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    /// Shapes of the injection sites: skip at level 0, skip at level 1, middle block.
    pub fn site_shapes(&self) -> [[usize; 4]; 3] {
        let [c0, c1] = self.widths;
        let (h, w) = (self.height, self.width);
        let n = self.frames;
        [[n, c0, h, w], [n, c1, h / 2, w / 2], [n, c1, h / 2, w / 2]]
    }
}

/// Text conditioning `[L, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T> {
    pub tokens: Vec<TokenId>,
    pub vectors: Tensor<T>,
}

/// Additive feature residuals, one per injection site, in [`ArchConfig::site_shapes`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStack<T> {
    pub residuals: Vec<Tensor<T>>,
}

impl<T: Real> ResidualStack<T> {
    pub fn zeros(cfg: &ArchConfig) -> Self {
        Self { residuals: cfg.site_shapes().iter().map(|s| Tensor::zeros(s)).collect() }
    }

    pub fn validate(&self, cfg: &ArchConfig) -> Result<()> {
        let want = cfg.site_shapes();
        ensure!(self.residuals.len() == want.len(), "expected {} residuals, got {}", want.len(), self.residuals.len());
        for (i, (r, s)) in self.residuals.iter().zip(want.iter()).enumerate() {
            ensure!(r.shape() == s, "residual {i}: shape {:?}, expected {:?}", r.shape(), s);
        }
        Ok(())
    }

    pub fn is_all_zero(&self) -> bool {
        self.residuals.iter().all(|r| r.data().iter().all(|&x| x == T::zero()))
    }

    /// Largest absolute difference per frame, over all sites.
    pub fn frame_deltas(&self, other: &Self) -> Vec<f64> {
        let frames = self.residuals[0].shape()[0];
        let mut out = vec![0.0f64; frames];
        for (a, b) in self.residuals.iter().zip(&other.residuals) {
            for (n, d) in out.iter_mut().enumerate() {
                for (&x, &y) in a.slab(n).iter().zip(b.slab(n)) {
                    *d = d.max((x - y).abs().as_f64());
                }
            }
        }
        out
    }
}

/// The parts of the network that a control encoder copies.
#[derive(Clone, Debug)]
pub(crate) struct EncoderHalf {
    pub time: TimeEmbedding,
    pub res0: ResBlock,
    pub down: Conv,
    pub res1: ResBlock,
    pub mid: ResBlock,
    pub cross: CrossAttention,
}

impl EncoderHalf {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, cfg: &ArchConfig, rng: &mut R) -> Self {
        let [c0, c1] = cfg.widths;
        let (td, g) = (cfg.time_dim, cfg.groups);
        Self {
            time: TimeEmbedding::new(ps, "time", td, rng),
            res0: ResBlock::new(ps, "down0.res", c0, c0, td, g, rng),
            down: Conv::new(ps, "down", c0, c1, 3, 2, Init::FanIn(1.0), rng),
            res1: ResBlock::new(ps, "down1.res", c1, c1, td, g, rng),
            mid: ResBlock::new(ps, "mid.res", c1, c1, td, g, rng),
            cross: CrossAttention::new(ps, "mid.cross", c1, cfg.text_dim, cfg.attn_dim, rng),
        }
    }
}

#[derive(Clone, Debug)]
struct BackboneNet {
    text_table: ParamId,
    conv_in: Conv,
    half: EncoderHalf,
    temporal0: TemporalAttention,
    temporal1: TemporalAttention,
    up1: ResBlock,
    up0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl BackboneNet {
    fn build<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, cfg: &ArchConfig, rng: &mut R) -> Self {
        let [c0, c1] = cfg.widths;
        let (td, g) = (cfg.time_dim, cfg.groups);
        let text_table = ps.init("text.table", &[cfg.vocab_size, cfg.text_dim], 1, Init::FanIn(1.0), rng);
        let conv_in = Conv::new(ps, "conv_in", cfg.channels, c0, 3, 1, Init::FanIn(1.0), rng);
        let half = EncoderHalf::new(ps, cfg, rng);
        let temporal0 = TemporalAttention::new(ps, "down0.temporal", c0, 1.0, rng);
        let temporal1 = TemporalAttention::new(ps, "down1.temporal", c1, 1.0, rng);
        let up1 = ResBlock::new(ps, "up1.res", 2 * c1, c1, td, g, rng);
        let up0 = ResBlock::new(ps, "up0.res", c1 + c0, c0, td, g, rng);
        let norm_out = GroupNorm::new(ps, "norm_out", c0, g, rng);
        let conv_out = Conv::new(ps, "conv_out", c0, cfg.channels, 3, 1, Init::Zero, rng);
        Self { text_table, conv_in, half, temporal0, temporal1, up1, up0, norm_out, conv_out }
    }
}

/// Backbone parameters plus the layer map that interprets them.
#[derive(Clone, Debug)]
pub struct BackboneWeights<T> {
    cfg: ArchConfig,
    params: ParamStore<T>,
    net: BackboneNet,
}

impl<T: Real> BackboneWeights<T> {
    /// Fresh weights; the output convolution starts at zero so the initial ε-prediction is 0.
    pub fn new<R: Rng + ?Sized>(cfg: ArchConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let net = BackboneNet::build(&mut params, &cfg, rng);
        Ok(Self { cfg, params, net })
    }

    /// Wraps loaded parameters after checking every name and shape against `cfg`.
    pub fn from_params(cfg: ArchConfig, params: ParamStore<T>) -> Result<Self> {
        let mut w = Self::new(cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        if !w.params.same_layout(&params) {
            return Err(Error::Config("parameter layout does not match the architecture".into()));
        }
        w.params = params;
        Ok(w)
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
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

    /// Replaces every parameter with uniform noise in `±scale/√fan_in`, including
    /// the zero-initialized output layer.
    pub fn randomize<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        self.params.randomize(scale, rng);
    }

    /// Zeroes every temporal attention parameter.
    pub fn zero_temporal(&mut self) {
        let ids: Vec<ParamId> = self.net.temporal0.params().into_iter().chain(self.net.temporal1.params()).collect();
        for id in ids {
            self.params.get_mut(id).data_mut().fill(T::zero());
        }
    }

    /// Embeds `tokens` in the graph so gradients reach the embedding table.
    pub(crate) fn text_in_graph(&self, g: &mut Graph<T>, p: &Bound, tokens: &[TokenId]) -> Var {
        let ids: Vec<usize> = if tokens.is_empty() { vec![NULL_TOKEN] } else { tokens.to_vec() };
        g.gather_rows(p.var(self.net.text_table), &ids)
    }

    /// ε-prediction inside an existing graph. `residuals` are added to the level-0
    /// skip, the level-1 skip and the middle-block output.
    pub(crate) fn forward_in(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        t: usize,
        text: Var,
        residuals: Option<&[Var]>,
    ) -> Var {
        let n = &self.net;
        let temb = n.half.time.forward(g, p, t);
        let h = n.conv_in.forward(g, p, z);
        let h = n.half.res0.forward(g, p, h, temb);
        let h = n.temporal0.forward(g, p, h);
        let skip0 = h;
        let h = n.half.down.forward(g, p, h);
        let h = n.half.res1.forward(g, p, h, temb);
        let h = n.temporal1.forward(g, p, h);
        let skip1 = h;
        let h = n.half.mid.forward(g, p, h, temb);
        let mut mid = n.half.cross.forward(g, p, h, text);
        let (mut skip0, mut skip1) = (skip0, skip1);
        if let Some(r) = residuals {
            skip0 = g.add(skip0, r[0]);
            skip1 = g.add(skip1, r[1]);
            mid = g.add(mid, r[2]);
        }
        let h = g.concat_channels(mid, skip1);
        let h = n.up1.forward(g, p, h, temb);
        let h = g.upsample2x(h);
        let h = g.concat_channels(h, skip0);
        let h = n.up0.forward(g, p, h, temb);
        let h = n.norm_out.forward(g, p, h);
        let h = g.silu(h);
        n.conv_out.forward(g, p, h)
    }

    pub(crate) fn check_video(&self, z: &Tensor<T>) -> Result<()> {
        ensure!(z.shape() == self.cfg.video_shape(), "video shape {:?}, expected {:?}", z.shape(), self.cfg.video_shape());
        Ok(())
    }

    pub(crate) fn check_text(&self, text: &TextEmbedding<T>) -> Result<()> {
        let s = text.vectors.shape();
        ensure!(s.len() == 2 && s[0] >= 1 && s[1] == self.cfg.text_dim, "text embedding shape {:?}", s);
        Ok(())
    }
}

/// Deterministic lookup of `tokens` in the backbone's embedding table. The empty
/// prompt maps to the single null-token row.
pub fn embed_text<T: Real>(tokens: &[TokenId], weights: &BackboneWeights<T>) -> Result<TextEmbedding<T>> {
    let vocab = weights.cfg.vocab_size;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Argument(alloc::format!("token {bad} outside vocabulary of {vocab}")));
    }
    let ids: Vec<TokenId> = if tokens.is_empty() { vec![NULL_TOKEN] } else { tokens.to_vec() };
    let table = weights.params.get(weights.net.text_table);
    let d = weights.cfg.text_dim;
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in &ids {
        data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Ok(TextEmbedding { tokens: ids.clone(), vectors: Tensor::from_vec(&[ids.len(), d], data)? })
}

pub fn null_embedding<T: Real>(weights: &BackboneWeights<T>) -> TextEmbedding<T> {
    embed_text(&[], weights).expect("null token is in range")
}

/// ε-prediction for `z_t` at step `t`.
pub fn backbone_forward<T: Real>(
    z_t: &VideoTensor<T>,
    t: usize,
    text: &TextEmbedding<T>,
    weights: &BackboneWeights<T>,
    residuals: Option<&ResidualStack<T>>,
) -> Result<VideoTensor<T>> {
    weights.check_video(z_t)?;
    weights.check_text(text)?;
    if let Some(r) = residuals {
        r.validate(&weights.cfg)?;
    }
    let mut g = Graph::new();
    let p = weights.params.bind(&mut g, false);
    let z = g.constant(z_t.clone());
    let txt = g.constant(text.vectors.clone());
    let res: Option<Vec<Var>> = residuals.map(|r| r.residuals.iter().map(|t| g.constant(t.clone())).collect());
    let out = weights.forward_in(&mut g, &p, z, t, txt, res.as_deref());
    Ok(g.into_value(out))
}
