//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the tape
//! in reverse. Nodes that do not depend on a gradient-carrying leaf are never
//! differentiated, so frozen weights cost nothing in the backward pass.
//!
//! Shape errors inside the graph are programming errors and panic; public entry
//! points validate user-supplied shapes before building a graph.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddTrailing(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let rank = in_shape.len();
    assert_eq!(perm.len(), rank);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    // stride in the input for each output axis
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = gather[last];
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        for j in 0..inner {
            out.push(src[offset + j * inner_stride]);
        }
        // advance the multi-index over the outer axes
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            offset += gather[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= gather[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out).expect("permute preserves size")
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        core::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("add: shape mismatch");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.len();
        let sa = av.shape();
        let sb = bv.shape();
        assert!(sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb, "add_trailing: {:?} vs {:?}", sa, sb);
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddTrailing(a, b), ng)
    }

    /// `a[:, c, ...] + b[c]` for `a` of shape `[B, C, ...]`.
    pub fn add_channel(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, ch) = (av.shape()[0], av.shape()[1]);
        assert_eq!(bv.len(), ch, "add_channel: bias length");
        let plane = av.len() / (batch * ch);
        let mut out = av.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bias = bv.data()[i % ch];
            for o in chunk {
                *o += bias;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddChannel(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    /// 2-D convolution of `x: [B, Cin, H, W]` with `w: [Cout, Cin, k, k]` and optional bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (batch, cin, h, wd) = xv.dims4();
        let (cout, wcin, k, k2) = wv.dims4();
        assert_eq!(cin, wcin, "conv2d: input channels");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let g = ConvGeom { cin, h, w: wd, k, stride, pad };
        let (ho, wo) = g.out_hw();
        let plane = ho * wo;
        let rows = g.col_rows();
        let mut out = Tensor::zeros(&[batch, cout, ho, wo]);
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); rows * plane] };
        for bi in 0..batch {
            let xs = xv.slab(bi);
            let dst = out.slab_mut(bi);
            if direct {
                kernels::gemm_nn(cout, rows, plane, wv.data(), xs, dst);
            } else {
                kernels::im2col(&g, xs, &mut cols);
                kernels::gemm_nn(cout, rows, plane, wv.data(), &cols, dst);
            }
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                    for o in chunk {
                        *o += bv[co];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let (batch, ch) = (xv.shape()[0], xv.shape()[1]);
        assert!(groups > 0 && ch % groups == 0, "group_norm: {} channels, {} groups", ch, groups);
        let spatial = xv.len() / (batch * ch);
        let per_group = ch / groups * spatial;
        let eps = T::lit(1e-5);
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); batch * groups];
        let mut out = Tensor::zeros(xv.shape());
        let m = T::from_usize(per_group).unwrap();
        for (gi, seg) in xv.data().chunks(per_group).enumerate() {
            let mean = seg.iter().copied().sum::<T>() / m;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let r = T::one() / (var + eps).sqrt();
            rstd[gi] = r;
            let base = gi * per_group;
            for (j, &v) in seg.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat[base + j] = xh;
                let c = (base + j) / spatial % ch;
                out.data_mut()[base + j] = xh * gm[c] + bt[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, ng)
    }

    /// Nearest-neighbour 2× spatial upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4();
        let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
        let src = xv.data();
        let dst = out.data_mut();
        for p in 0..b * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Upsample2x(x), ng)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let sa = av.shape();
        let sb = bv.shape();
        assert!(sa[0] == sb[0] && sa[2..] == sb[2..], "concat_channels: {:?} vs {:?}", sa, sb);
        let batch = sa[0];
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..batch {
            data.extend_from_slice(av.slab(i));
            data.extend_from_slice(bv.slab(i));
        }
        let out = Tensor::from_vec(&shape, data).expect("concat size");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatChannels(a, b), ng)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = permute_tensor(self.value(x), perm);
        let ng = self.ng(x);
        self.push(out, Op::Permute(x, perm.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).expect("reshape size");
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Batched matrix product. `a: [..., M, K]`; `b: [K, N]` (shared across the batch)
    /// or `[..., K, N]`. With `trans_b`, `b` holds the transposed layout `[..., N, K]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, m, k, n, shared) = Self::mm_dims(av.shape(), bv.shape(), trans_b);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        let (ad, bd) = (av.data(), bv.data());
        let od = out.data_mut();
        for i in 0..batch {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = if shared { bd } else { &bd[i * k * n..(i + 1) * k * n] };
            let oi = &mut od[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(m, k, n, ai, bi, oi);
            } else {
                kernels::gemm_nn(m, k, n, ai, bi, oi);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, trans_b }, ng)
    }

    fn mm_dims(sa: &[usize], sb: &[usize], trans_b: bool) -> (usize, usize, usize, usize, bool) {
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul: rank >= 2");
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        assert_eq!(k, bk, "matmul: inner dims {:?} x {:?}", sa, sb);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared = sb.len() == 2;
        if !shared {
            assert_eq!(sa[..sa.len() - 2], sb[..sb.len() - 2], "matmul: batch dims");
        }
        (batch, m, k, n, shared)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Row lookup `table[ids[i], :]` producing `[ids.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.shape()[1];
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], data).expect("gather size");
        let ng = self.ng(table);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    /// Mean squared error, a scalar node of shape `[1]`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse: shape mismatch");
        let n = T::from_usize(av.len()).unwrap();
        let s = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s), Op::Mse(a, b), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward: scalar loss required");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Accumulates in place into the slot for `v`, creating a zero tensor if needed.
    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.ng(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddTrailing(a, b) => {
                self.acc(grads, *a, g.clone());
                let n = self.value(*b).len();
                self.acc_with(grads, *b, |gb| {
                    for chunk in g.data().chunks(n) {
                        for (o, &x) in gb.data_mut().iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                });
            }
            Op::AddChannel(a, b) => {
                self.acc(grads, *a, g.clone());
                let sa = self.value(*a).shape();
                let ch = sa[1];
                let plane = g.len() / (sa[0] * ch);
                self.acc_with(grads, *b, |gb| {
                    for (j, chunk) in g.data().chunks(plane).enumerate() {
                        gb.data_mut()[j % ch] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::Silu(a) => {
                let x = self.value(*a);
                let gx = Tensor::from_fn(x.shape(), |j| {
                    let v = x.data()[j];
                    let s = sigmoid(v);
                    g.data()[j] * s * (T::one() + v * (T::one() - s))
                });
                self.acc(grads, *a, gx);
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv_backward(*x, *w, *b, *stride, *pad, g, grads),
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let xv = self.value(*x);
                let (batch, ch) = (xv.shape()[0], xv.shape()[1]);
                let spatial = xv.len() / (batch * ch);
                let per_group = ch / groups * spatial;
                let gm = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dgamma = vec![T::zero(); ch];
                    let mut dbeta = vec![T::zero(); ch];
                    for (j, (&gj, &xh)) in g.data().iter().zip(xhat).enumerate() {
                        let c = j / spatial % ch;
                        dgamma[c] += gj * xh;
                        dbeta[c] += gj;
                    }
                    self.acc(grads, *gamma, Tensor::from_vec(&[ch], dgamma).unwrap());
                    self.acc(grads, *beta, Tensor::from_vec(&[ch], dbeta).unwrap());
                }
                if self.ng(*x) {
                    let m = T::from_usize(per_group).unwrap();
                    let mut gx = Tensor::zeros(xv.shape());
                    for gi in 0..batch * groups {
                        let base = gi * per_group;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in base..base + per_group {
                            let d = g.data()[j] * gm[j / spatial % ch];
                            sum_d += d;
                            sum_dx += d * xhat[j];
                        }
                        let r = rstd[gi];
                        for j in base..base + per_group {
                            let d = g.data()[j] * gm[j / spatial % ch];
                            gx.data_mut()[j] = r / m * (m * d - sum_d - xhat[j] * sum_dx);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Upsample2x(x) => {
                let (b, c, h, w) = self.value(*x).dims4();
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                let gd = g.data();
                let dst = gx.data_mut();
                for p in 0..b * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatChannels(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let batch = av.shape()[0];
                let (na, nb) = (av.len() / batch, bv.len() / batch);
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(bv.len());
                for i in 0..batch {
                    let s = &g.data()[i * (na + nb)..(i + 1) * (na + nb)];
                    ga.extend_from_slice(&s[..na]);
                    gb.extend_from_slice(&s[na..]);
                }
                self.acc(grads, *a, Tensor::from_vec(av.shape(), ga).unwrap());
                self.acc(grads, *b, Tensor::from_vec(bv.shape(), gb).unwrap());
            }
            Op::Permute(x, perm) => {
                let gx = permute_tensor(g, &inverse_perm(perm));
                self.acc(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.value(*x).shape()).unwrap();
                self.acc(grads, *x, gx);
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k, n, shared) = Self::mm_dims(av.shape(), bv.shape(), *trans_b);
                let gd = g.data();
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = if shared { bv.data() } else { &bv.data()[i * k * n..(i + 1) * k * n] };
                        let dst = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            kernels::gemm_nn(m, n, k, gi, bi, dst);
                        } else {
                            kernels::gemm_nt(m, n, k, gi, bi, dst);
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let dst = if shared { gb.data_mut() } else { &mut gb.data_mut()[i * k * n..(i + 1) * k * n] };
                        if *trans_b {
                            kernels::gemm_tn(n, m, k, gi, ai, dst);
                        } else {
                            kernels::gemm_tn(k, m, n, ai, gi, dst);
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut gx = Tensor::zeros(y.shape());
                for ((yr, gr), dr) in y.data().chunks(n).zip(g.data().chunks(n)).zip(gx.data_mut().chunks_mut(n)) {
                    let s = kernels::dot(yr, gr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).shape()[1];
                self.acc_with(grads, *table, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g.data()[row * d..(row + 1) * d];
                        for (o, &x) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let coef = g.data()[0] * T::lit(2.0) / T::from_usize(av.len()).unwrap();
                let diff = av.zip_map(bv, |x, y| (x - y) * coef).unwrap();
                if self.ng(*b) {
                    self.acc(grads, *b, diff.scale(-T::one()));
                }
                self.acc(grads, *a, diff);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (batch, cin, h, wd) = xv.dims4();
        let (cout, _, k, _) = wv.dims4();
        let geom = ConvGeom { cin, h, w: wd, k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let plane = ho * wo;
        let rows = geom.col_rows();
        let direct = k == 1 && stride == 1 && pad == 0;
        let (need_x, need_w) = (self.ng(x), self.ng(w));

        if let Some(b) = b {
            self.acc_with(grads, b, |gb| {
                for bi in 0..batch {
                    for (co, chunk) in g.slab(bi).chunks(plane).enumerate() {
                        gb.data_mut()[co] += chunk.iter().copied().sum::<T>();
                    }
                }
            });
        }
        if !need_x && !need_w {
            return;
        }
        let mut gw = if need_w { Some(Tensor::zeros(wv.shape())) } else { None };
        let mut gx = if need_x { Some(Tensor::zeros(xv.shape())) } else { None };
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); rows * plane] };
        let mut dcols = if direct || !need_x { Vec::new() } else { vec![T::zero(); rows * plane] };
        for bi in 0..batch {
            let gs = g.slab(bi);
            if let Some(gw) = gw.as_mut() {
                if direct {
                    kernels::gemm_nt(cout, plane, rows, gs, xv.slab(bi), gw.data_mut());
                } else {
                    kernels::im2col(&geom, xv.slab(bi), &mut cols);
                    kernels::gemm_nt(cout, plane, rows, gs, &cols, gw.data_mut());
                }
            }
            if let Some(gx) = gx.as_mut() {
                if direct {
                    kernels::gemm_tn(rows, cout, plane, wv.data(), gs, gx.slab_mut(bi));
                } else {
                    dcols.fill(T::zero());
                    kernels::gemm_tn(rows, cout, plane, wv.data(), gs, &mut dcols);
                    kernels::col2im(&geom, &dcols, gx.slab_mut(bi));
                }
            }
        }
        if let Some(gw) = gw {
            self.acc(grads, w, gw);
        }
        if let Some(gx) = gx {
            self.acc(grads, x, gx);
        }
    }
}
