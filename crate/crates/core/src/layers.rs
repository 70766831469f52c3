//! Building blocks shared by the backbone and the sparse encoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = ps.init(format!("{name}.w"), &[cout, cin, k, k], fan_in, init, rng);
        let b = ps.init(format!("{name}.b"), &[cout], fan_in, init, rng);
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// `x · W + b` with `W: [in, out]` applied over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = ps.init(format!("{name}.w"), &[din, dout], din, init, rng);
        let b = ps.init(format!("{name}.b"), &[dout], din, init, rng);
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w), false);
        g.add_trailing(y, p.var(self.b))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, ch: usize, groups: usize, rng: &mut R) -> Self {
        let gamma = ps.init(format!("{name}.gamma"), &[ch], ch, Init::Const(1.0), rng);
        let beta = ps.init(format!("{name}.beta"), &[ch], ch, Init::Zero, rng);
        Self { gamma, beta, groups }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups)
    }
}

/// Pre-activation residual block with an additive timestep projection.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let norm1 = GroupNorm::new(ps, &format!("{name}.norm1"), cin, groups, rng);
        let conv1 = Conv::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, Init::FanIn(1.0), rng);
        let temb = Linear::new(ps, &format!("{name}.temb"), time_dim, cout, Init::FanIn(1.0), rng);
        let norm2 = GroupNorm::new(ps, &format!("{name}.norm2"), cout, groups, rng);
        let conv2 = Conv::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, Init::FanIn(1.0), rng);
        let skip = (cin != cout).then(|| Conv::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, Init::FanIn(1.0), rng));
        Self { norm1, conv1, temb, norm2, conv2, skip }
    }

    /// `temb` is the activated timestep embedding, shape `[1, time_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, temb: Var) -> Var {
        let h = self.norm1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        let e = self.temb.forward(g, p, temb);
        let cout = g.value(e).len();
        let e = g.reshape(e, &[cout]);
        let h = g.add_channel(h, e);
        let h = self.norm2.forward(g, p, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, p, x),
            None => x,
        };
        g.add(skip, h)
    }
}

/// Sinusoidal encoding of frame positions, `[frames, dim]`.
pub fn frame_positions<T: Real>(frames: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[frames, dim], |idx| {
        let (pos, i) = (idx / dim, idx % dim);
        let rate = libm::pow(10000.0, -((i / 2 * 2) as f64) / dim as f64);
        let angle = pos as f64 * rate;
        T::lit(if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) })
    })
}

/// Sinusoidal embedding of a diffusion step, `[1, dim]`.
pub fn timestep_features<T: Real>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let j = i % half.max(1);
        let freq = libm::exp(-libm::log(10000.0) * j as f64 / half.max(1) as f64);
        let angle = t as f64 * freq;
        T::lit(if i < half { libm::sin(angle) } else { libm::cos(angle) })
    })
}

/// Self-attention across the frame axis, independently at every spatial location.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl TemporalAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, ch: usize, scale: f64, rng: &mut R) -> Self {
        let init = Init::FanIn(scale);
        Self {
            q: Linear::new(ps, &format!("{name}.q"), ch, ch, init, rng),
            k: Linear::new(ps, &format!("{name}.k"), ch, ch, init, rng),
            v: Linear::new(ps, &format!("{name}.v"), ch, ch, init, rng),
            out: Linear::new(ps, &format!("{name}.out"), ch, ch, init, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.out].iter().flat_map(|l| l.params()).collect()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let (n, c, h, w) = g.value(x).dims4();
        let tokens = g.permute(x, &[2, 3, 0, 1]);
        let tokens = g.reshape(tokens, &[h * w, n, c]);
        let pe = g.constant(frame_positions(n, c));
        let u = g.add_trailing(tokens, pe);
        let q = self.q.forward(g, p, u);
        let k = self.k.forward(g, p, u);
        let v = self.v.forward(g, p, u);
        let s = g.matmul(q, k, true);
        let s = g.scale(s, T::one() / T::from_usize(c).unwrap().sqrt());
        let a = g.softmax(s);
        let o = g.matmul(a, v, false);
        let o = self.out.forward(g, p, o);
        let o = g.reshape(o, &[h, w, n, c]);
        let o = g.permute(o, &[2, 3, 0, 1]);
        g.add(x, o)
    }
}

/// Spatial tokens attend to the text tokens.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl CrossAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        ch: usize,
        text_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Self {
        let init = Init::FanIn(1.0);
        Self {
            q: Linear::new(ps, &format!("{name}.q"), ch, attn_dim, init, rng),
            k: Linear::new(ps, &format!("{name}.k"), text_dim, attn_dim, init, rng),
            v: Linear::new(ps, &format!("{name}.v"), text_dim, attn_dim, init, rng),
            out: Linear::new(ps, &format!("{name}.out"), attn_dim, ch, init, rng),
        }
    }

    /// `text` is `[L, text_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, text: Var) -> Var {
        let (n, c, h, w) = g.value(x).dims4();
        let tokens = g.permute(x, &[0, 2, 3, 1]);
        let tokens = g.reshape(tokens, &[n * h * w, c]);
        let q = self.q.forward(g, p, tokens);
        let k = self.k.forward(g, p, text);
        let v = self.v.forward(g, p, text);
        let da = g.value(q).shape()[1];
        let s = g.matmul(q, k, true);
        let s = g.scale(s, T::one() / T::from_usize(da).unwrap().sqrt());
        let a = g.softmax(s);
        let o = g.matmul(a, v, false);
        let o = self.out.forward(g, p, o);
        let o = g.reshape(o, &[n, h, w, c]);
        let o = g.permute(o, &[0, 3, 1, 2]);
        g.add(x, o)
    }
}

/// Two-layer MLP over sinusoidal step features; returns the activated embedding.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    l1: Linear,
    l2: Linear,
    dim: usize,
}

impl TimeEmbedding {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(ps, &format!("{name}.l1"), dim, dim, Init::FanIn(1.0), rng),
            l2: Linear::new(ps, &format!("{name}.l2"), dim, dim, Init::FanIn(1.0), rng),
            dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, t: usize) -> Var {
        let s = g.constant(timestep_features(t, self.dim));
        let h = self.l1.forward(g, p, s);
        let h = g.silu(h);
        let h = self.l2.forward(g, p, h);
        g.silu(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_differ_per_frame() {
        let pe = frame_positions::<f64>(4, 6);
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(pe.slab(a), pe.slab(b));
            }
        }
        assert_eq!(pe.data()[0], 0.0); // sin(0)
        assert_eq!(pe.data()[1], 1.0); // cos(0)
    }
}
