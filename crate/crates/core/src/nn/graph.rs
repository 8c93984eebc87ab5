//! A small reverse-mode autodiff tape over channel-major tensors.
//!
//! Each builder method runs the forward computation immediately and records
//! what the backward pass needs. `backward` walks the tape in reverse and
//! returns one gradient per parameter of the bound [`ParamSet`].

use super::params::ParamSet;
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How attention groups tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    /// Tokens are the positions of one frame.
    Spatial,
    /// Tokens are the frames at one position.
    Temporal,
    /// Every query position attends to the same key/value tokens, laid out on the frame axis.
    Cross,
}

enum Op<T> {
    Leaf,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
        cols: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        x: Var,
        v: Var,
    },
    Upsample {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mode: AttnMode,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    record: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    /// `record = false` skips the caches needed by `backward` (inference mode).
    pub fn new(params: &'p ParamSet<T>, record: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            record,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].op {
            Op::Param(i) => self.params.value(*i),
            _ => &self.nodes[v.0].value,
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|&v| self.needs_grad(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_nodes[index] {
            return v;
        }
        self.nodes.push(Node {
            value: Tensor::zeros([0, 0, 0, 0]),
            op: Op::Param(index),
            needs_grad: self.record,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[index] = Some(v);
        v
    }

    /// Convolution with a `k × k` kernel (k odd), zero padding `k/2`, stride 1 or 2.
    /// Weights are `[out, in·k·k]`, bias `[out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, k: usize, stride: usize) -> Var {
        let (value, cols) = {
            let xt = self.value(x);
            let wt = self.value(w);
            let [ci, n, h, wd] = xt.shape;
            let co = wt.shape[0];
            let kk = ci * k * k;
            assert_eq!(wt.shape[1], kk, "conv weight does not match input channels");
            let pad = k / 2;
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (wd + 2 * pad - k) / stride + 1;
            let p_out = n * ho * wo;
            let mut out = vec![T::zero(); co * p_out];
            let cols = if k == 1 && stride == 1 {
                Vec::new()
            } else {
                im2col(&xt.data, [ci, n, h, wd], k, stride, ho, wo)
            };
            let rhs: &[T] = if cols.is_empty() { &xt.data } else { &cols };
            T::gemm(co, kk, p_out, T::one(), &wt.data, (kk, 1), rhs, (p_out, 1), T::zero(), &mut out, p_out);
            if let Some(b) = b {
                let bias = &self.value(b).data;
                for (row, &bv) in out.chunks_mut(p_out).zip(bias) {
                    row.iter_mut().for_each(|o| *o += bv);
                }
            }
            (Tensor::from_vec([co, n, ho, wo], out), cols)
        };
        let cols = if self.record { cols } else { Vec::new() };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv { x, w, b, k, stride, cols }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let (value, xhat, rstd) = {
            let xt = self.value(x);
            let [c, n, h, w] = xt.shape;
            assert_eq!(c % groups, 0, "channels not divisible by groups");
            let cg = c / groups;
            let hw = h * w;
            let m = (cg * hw) as f64;
            let gamma = &self.value(gamma).data;
            let beta = &self.value(beta).data;
            let mut xhat = vec![T::zero(); xt.len()];
            let mut out = vec![T::zero(); xt.len()];
            let mut rstd = vec![T::zero(); n * groups];
            for ni in 0..n {
                for g in 0..groups {
                    let mut sum = 0.0f64;
                    for ch in g * cg..(g + 1) * cg {
                        let base = (ch * n + ni) * hw;
                        sum += xt.data[base..base + hw].iter().fold(T::zero(), |a, &v| a + v).to_f64().unwrap();
                    }
                    let mean = sum / m;
                    let mut var = 0.0f64;
                    let mean_t = T::of(mean);
                    for ch in g * cg..(g + 1) * cg {
                        let base = (ch * n + ni) * hw;
                        let sq = xt.data[base..base + hw].iter().fold(T::zero(), |a, &v| {
                            let d = v - mean_t;
                            a + d * d
                        });
                        var += sq.to_f64().unwrap();
                    }
                    let r = 1.0 / (var / m + EPS).sqrt();
                    rstd[ni * groups + g] = T::of(r);
                    let r_t = T::of(r);
                    for ch in g * cg..(g + 1) * cg {
                        let base = (ch * n + ni) * hw;
                        for i in base..base + hw {
                            let xh = (xt.data[i] - mean_t) * r_t;
                            xhat[i] = xh;
                            out[i] = xh * gamma[ch] + beta[ch];
                        }
                    }
                }
            }
            (Tensor::from_vec(xt.shape, out), xhat, rstd)
        };
        let (xhat, rstd) = if self.record { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let value = Tensor::from_vec(xt.shape, xt.data.iter().map(|&v| v * sigmoid(v)).collect());
        self.push(value, Op::Silu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.shape, bt.shape, "add shape mismatch");
        let value = Tensor::from_vec(at.shape, at.data.iter().zip(&bt.data).map(|(&x, &y)| x + y).collect());
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    /// `x [c, n, h, w] + v [c, 1 or n, 1, 1]`, broadcasting over positions (and frames).
    pub fn add_broadcast(&mut self, x: Var, v: Var) -> Var {
        let (xt, vt) = (self.value(x), self.value(v));
        let [c, n, h, w] = xt.shape;
        let nv = vt.shape[1];
        assert!(
            vt.shape[0] == c && (nv == 1 || nv == n) && vt.shape[2] == 1 && vt.shape[3] == 1,
            "add_broadcast shape mismatch {:?} + {:?}",
            xt.shape,
            vt.shape
        );
        let hw = h * w;
        let mut out = xt.data.clone();
        for ch in 0..c {
            for ni in 0..n {
                let add = vt.data[ch * nv + if nv == 1 { 0 } else { ni }];
                let base = (ch * n + ni) * hw;
                out[base..base + hw].iter_mut().for_each(|o| *o += add);
            }
        }
        let value = Tensor::from_vec(xt.shape, out);
        self.push(value, Op::AddBroadcast { x, v }, &[x, v])
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let [c, n, h, w] = xt.shape;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * n * h2 * w2];
        for cn in 0..c * n {
            let src = &xt.data[cn * h * w..(cn + 1) * h * w];
            let dst = &mut out[cn * h2 * w2..(cn + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::from_vec([c, n, h2, w2], out);
        self.push(value, Op::Upsample { x }, &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.shape[1..], bt.shape[1..], "concat shape mismatch");
        let mut data = at.data.clone();
        data.extend_from_slice(&bt.data);
        let value = Tensor::from_vec([at.shape[0] + bt.shape[0], at.shape[1], at.shape[2], at.shape[3]], data);
        self.push(value, Op::Concat { a, b }, &[a, b])
    }

    /// Single-head scaled dot-product attention. `q`, `k`, `v` are channel-major
    /// `[d, n, h, w]`; in [`AttnMode::Cross`] `k` and `v` are `[d, tokens, 1, 1]`
    /// and shared by every frame.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mode: AttnMode) -> Var {
        let (value, probs) = {
            let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
            assert_eq!(kt.shape, vt.shape, "attention key/value mismatch");
            assert_eq!(kt.shape[0], qt.shape[0], "attention key width mismatch");
            if mode != AttnMode::Cross {
                assert_eq!(kt.shape, qt.shape, "self-attention shape mismatch");
            }
            let mut out = vec![T::zero(); qt.len()];
            let probs = match mode {
                AttnMode::Temporal => temporal_forward(&qt.data, &kt.data, &vt.data, qt.shape, &mut out),
                _ => framewise_forward(&qt.data, &kt.data, &vt.data, qt.shape, kt.shape, mode, &mut out),
            };
            (Tensor::from_vec(qt.shape, out), probs)
        };
        let probs = if self.record { probs } else { Vec::new() };
        self.push(value, Op::Attention { q, k, v, mode, probs }, &[q, k, v])
    }

    /// Mean squared error; the result is a `[1, 1, 1, 1]` scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (pt, tt) = (self.value(pred), self.value(target));
        assert_eq!(pt.shape, tt.shape, "mse shape mismatch");
        let n = pt.len() as f64;
        let ss: f64 = pt
            .data
            .iter()
            .zip(&tt.data)
            .map(|(&a, &b)| {
                let d = (a - b).to_f64().unwrap();
                d * d
            })
            .sum();
        let value = Tensor::from_vec([1, 1, 1, 1], vec![T::of(ss / n)]);
        self.push(value, Op::Mse { pred, target }, &[pred, target])
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    /// Parameters that did not take part get zero gradients.
    pub fn backward(&self, loss: Var) -> Vec<Tensor<T>> {
        assert!(self.record, "backward on a graph built without recording");
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut param_grads: Vec<Tensor<T>> = (0..self.params.len())
            .map(|i| Tensor::zeros(self.params.value(i).shape))
            .collect();

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(i) => {
                    for (g, d) in param_grads[*i].data.iter_mut().zip(&dy) {
                        *g += *d;
                    }
                }
                Op::Conv { x, w, b, k, stride, cols } => {
                    let xt = self.value(*x);
                    let wt = self.value(*w);
                    let [ci, n, h, wd] = xt.shape;
                    let [co, _, ho, wo] = node.value.shape;
                    let kk = ci * k * k;
                    let p_out = n * ho * wo;
                    let rhs: &[T] = if cols.is_empty() { &xt.data } else { cols };
                    if self.needs_grad(*w) {
                        let gw = grad_slot(&mut grads, *w, wt.len());
                        T::gemm(co, p_out, kk, T::one(), &dy, (p_out, 1), rhs, (1, p_out), T::one(), gw, kk);
                    }
                    if let Some(b) = b {
                        if self.needs_grad(*b) {
                            let gb = grad_slot(&mut grads, *b, co);
                            for (g, row) in gb.iter_mut().zip(dy.chunks(p_out)) {
                                *g += row.iter().fold(T::zero(), |a, &v| a + v);
                            }
                        }
                    }
                    if self.needs_grad(*x) {
                        if cols.is_empty() {
                            let gx = grad_slot(&mut grads, *x, xt.len());
                            T::gemm(kk, co, p_out, T::one(), &wt.data, (1, kk), &dy, (p_out, 1), T::one(), gx, p_out);
                        } else {
                            let mut dcols = vec![T::zero(); kk * p_out];
                            T::gemm(kk, co, p_out, T::one(), &wt.data, (1, kk), &dy, (p_out, 1), T::zero(), &mut dcols, p_out);
                            let gx = grad_slot(&mut grads, *x, xt.len());
                            col2im(&dcols, gx, [ci, n, h, wd], *k, *stride, ho, wo);
                        }
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let [c, n, h, w] = node.value.shape;
                    let hw = h * w;
                    let cg = c / groups;
                    let gam = &self.value(*gamma).data;
                    if self.needs_grad(*gamma) {
                        let gg = grad_slot(&mut grads, *gamma, c);
                        for ch in 0..c {
                            let s = &dy[ch * n * hw..(ch + 1) * n * hw];
                            let xh = &xhat[ch * n * hw..(ch + 1) * n * hw];
                            gg[ch] += s.iter().zip(xh).fold(T::zero(), |a, (&d, &x)| a + d * x);
                        }
                    }
                    if self.needs_grad(*beta) {
                        let gb = grad_slot(&mut grads, *beta, c);
                        for ch in 0..c {
                            gb[ch] += dy[ch * n * hw..(ch + 1) * n * hw].iter().fold(T::zero(), |a, &v| a + v);
                        }
                    }
                    if self.needs_grad(*x) {
                        let gx = grad_slot(&mut grads, *x, c * n * hw);
                        let m = T::of((cg * hw) as f64);
                        for ni in 0..n {
                            for g in 0..*groups {
                                let r = rstd[ni * groups + g];
                                let mut s1 = T::zero();
                                let mut s2 = T::zero();
                                for ch in g * cg..(g + 1) * cg {
                                    let base = (ch * n + ni) * hw;
                                    for i in base..base + hw {
                                        let dxh = dy[i] * gam[ch];
                                        s1 += dxh;
                                        s2 += dxh * xhat[i];
                                    }
                                }
                                let (s1, s2) = (s1 / m, s2 / m);
                                for ch in g * cg..(g + 1) * cg {
                                    let base = (ch * n + ni) * hw;
                                    for i in base..base + hw {
                                        gx[i] += r * (dy[i] * gam[ch] - s1 - xhat[i] * s2);
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Silu { x } => {
                    if self.needs_grad(*x) {
                        let xt = &self.value(*x).data;
                        let gx = grad_slot(&mut grads, *x, xt.len());
                        for ((g, &d), &v) in gx.iter_mut().zip(&dy).zip(xt) {
                            let s = sigmoid(v);
                            *g += d * s * (T::one() + v * (T::one() - s));
                        }
                    }
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        if self.needs_grad(v) {
                            let g = grad_slot(&mut grads, v, dy.len());
                            g.iter_mut().zip(&dy).for_each(|(g, &d)| *g += d);
                        }
                    }
                }
                Op::AddBroadcast { x, v } => {
                    if self.needs_grad(*x) {
                        let g = grad_slot(&mut grads, *x, dy.len());
                        g.iter_mut().zip(&dy).for_each(|(g, &d)| *g += d);
                    }
                    if self.needs_grad(*v) {
                        let [c, n, h, w] = node.value.shape;
                        let hw = h * w;
                        let nv = self.value(*v).shape[1];
                        let gv = grad_slot(&mut grads, *v, c * nv);
                        for ch in 0..c {
                            for ni in 0..n {
                                let base = (ch * n + ni) * hw;
                                let s = dy[base..base + hw].iter().fold(T::zero(), |a, &v| a + v);
                                gv[ch * nv + if nv == 1 { 0 } else { ni }] += s;
                            }
                        }
                    }
                }
                Op::Upsample { x } => {
                    if self.needs_grad(*x) {
                        let [c, n, h, w] = self.value(*x).shape;
                        let (h2, w2) = (2 * h, 2 * w);
                        let gx = grad_slot(&mut grads, *x, c * n * h * w);
                        for cn in 0..c * n {
                            let src = &dy[cn * h2 * w2..(cn + 1) * h2 * w2];
                            let dst = &mut gx[cn * h * w..(cn + 1) * h * w];
                            for y in 0..h2 {
                                for x in 0..w2 {
                                    dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                                }
                            }
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let la = self.value(*a).len();
                    if self.needs_grad(*a) {
                        let g = grad_slot(&mut grads, *a, la);
                        g.iter_mut().zip(&dy[..la]).for_each(|(g, &d)| *g += d);
                    }
                    if self.needs_grad(*b) {
                        let g = grad_slot(&mut grads, *b, dy.len() - la);
                        g.iter_mut().zip(&dy[la..]).for_each(|(g, &d)| *g += d);
                    }
                }
                Op::Attention { q, k, v, mode, probs } => {
                    let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = vec![T::zero(); qt.len()];
                    let mut dk = vec![T::zero(); kt.len()];
                    let mut dv = vec![T::zero(); vt.len()];
                    let bufs = AttnGrads {
                        dq: &mut dq,
                        dk: &mut dk,
                        dv: &mut dv,
                    };
                    match mode {
                        AttnMode::Temporal => temporal_backward(&qt.data, &kt.data, &vt.data, qt.shape, probs, &dy, bufs),
                        _ => framewise_backward(&qt.data, &kt.data, &vt.data, qt.shape, kt.shape, *mode, probs, &dy, bufs),
                    }
                    for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.needs_grad(var) {
                            let slot = grad_slot(&mut grads, var, g.len());
                            accumulate(slot, &g);
                        }
                    }
                }
                Op::Mse { pred, target } => {
                    let (pt, tt) = (self.value(*pred), self.value(*target));
                    let scale = dy[0] * T::of(2.0 / pt.len() as f64);
                    if self.needs_grad(*pred) {
                        let g = grad_slot(&mut grads, *pred, pt.len());
                        for ((g, &a), &b) in g.iter_mut().zip(&pt.data).zip(&tt.data) {
                            *g += scale * (a - b);
                        }
                    }
                    if self.needs_grad(*target) {
                        let g = grad_slot(&mut grads, *target, pt.len());
                        for ((g, &a), &b) in g.iter_mut().zip(&pt.data).zip(&tt.data) {
                            *g -= scale * (a - b);
                        }
                    }
                }
            }
        }
        param_grads
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies inside `[0, w)`.
fn valid_range(kx: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi = if w + pad > kx { (w + pad - kx - 1) / stride + 1 } else { 0 };
    (lo.min(wo), hi.min(wo))
}

fn im2col<T: Real>(x: &[T], [ci, n, h, w]: [usize; 4], k: usize, stride: usize, ho: usize, wo: usize) -> Vec<T> {
    let pad = k / 2;
    let p_out = n * ho * wo;
    let mut cols = vec![T::zero(); ci * k * k * p_out];
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p_out..][..p_out];
                let (lo, hi) = valid_range(kx, pad, stride, w, wo);
                if lo >= hi {
                    continue;
                }
                for ni in 0..n {
                    let src = &x[(c * n + ni) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let srow = &src[(iy - pad) * w..][..w];
                        let drow = &mut row[(ni * ho + oy) * wo..][..wo];
                        if stride == 1 {
                            drow[lo..hi].copy_from_slice(&srow[lo + kx - pad..hi + kx - pad]);
                        } else {
                            for ox in lo..hi {
                                drow[ox] = srow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], gx: &mut [T], [ci, n, h, w]: [usize; 4], k: usize, stride: usize, ho: usize, wo: usize) {
    let pad = k / 2;
    let p_out = n * ho * wo;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p_out..][..p_out];
                let (lo, hi) = valid_range(kx, pad, stride, w, wo);
                if lo >= hi {
                    continue;
                }
                for ni in 0..n {
                    let dst = &mut gx[(c * n + ni) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let drow = &mut dst[(iy - pad) * w..][..w];
                        let srow = &row[(ni * ho + oy) * wo..][..wo];
                        if stride == 1 {
                            let d = &mut drow[lo + kx - pad..hi + kx - pad];
                            for (a, &b) in d.iter_mut().zip(&srow[lo..hi]) {
                                *a += b;
                            }
                        } else {
                            for ox in lo..hi {
                                drow[ox * stride + kx - pad] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct AttnGrads<'a, T> {
    dq: &'a mut [T],
    dk: &'a mut [T],
    dv: &'a mut [T],
}

/// Strides and offsets of the key/value matrix `[d, lk]` seen by frame `f`.
fn kv_layout(kshape: [usize; 4], qshape: [usize; 4], mode: AttnMode, f: usize) -> (usize, usize, usize) {
    let [_, n, h, w] = qshape;
    match mode {
        AttnMode::Cross => {
            let lk = kshape[1] * kshape[2] * kshape[3];
            (0, lk, lk)
        }
        _ => (f * h * w, n * h * w, h * w),
    }
}

fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Attention within each frame (spatial) or from each frame to shared tokens (cross).
/// Returns the probabilities `[n, lq, lk]`.
fn framewise_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    qshape: [usize; 4],
    kshape: [usize; 4],
    mode: AttnMode,
    out: &mut [T],
) -> Vec<T> {
    let [d, n, h, w] = qshape;
    let (lq, qs) = (h * w, n * h * w);
    let scale = T::of(1.0 / (d as f64).sqrt());
    let lk = kv_layout(kshape, qshape, mode, 0).2;
    let mut probs = vec![T::zero(); n * lq * lk];
    for f in 0..n {
        let (koff, ks, _) = kv_layout(kshape, qshape, mode, f);
        let pf = &mut probs[f * lq * lk..][..lq * lk];
        T::gemm(lq, d, lk, scale, &q[f * lq..], (1, qs), &k[koff..], (ks, 1), T::zero(), pf, lk);
        softmax_rows(pf, lk);
        T::gemm(d, lk, lq, T::one(), &v[koff..], (ks, 1), pf, (1, lk), T::zero(), &mut out[f * lq..], qs);
    }
    probs
}

#[allow(clippy::too_many_arguments)]
fn framewise_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    qshape: [usize; 4],
    kshape: [usize; 4],
    mode: AttnMode,
    probs: &[T],
    dout: &[T],
    g: AttnGrads<'_, T>,
) {
    let [d, n, h, w] = qshape;
    let (lq, qs) = (h * w, n * h * w);
    let scale = T::of(1.0 / (d as f64).sqrt());
    let lk = kv_layout(kshape, qshape, mode, 0).2;
    let mut ds = vec![T::zero(); lq * lk];
    for f in 0..n {
        let (koff, ks, _) = kv_layout(kshape, qshape, mode, f);
        let pf = &probs[f * lq * lk..][..lq * lk];
        let qf = &q[f * lq..];
        let dof = &dout[f * lq..];
        T::gemm(d, lq, lk, T::one(), dof, (qs, 1), pf, (lk, 1), T::one(), &mut g.dv[koff..], ks);
        T::gemm(lq, d, lk, T::one(), dof, (1, qs), &v[koff..], (ks, 1), T::zero(), &mut ds, lk);
        for (drow, prow) in ds.chunks_mut(lk).zip(pf.chunks(lk)) {
            let dot = drow.iter().zip(prow).fold(T::zero(), |a, (&x, &p)| a + x * p);
            for (x, &p) in drow.iter_mut().zip(prow) {
                *x = p * (*x - dot) * scale;
            }
        }
        T::gemm(d, lk, lq, T::one(), &k[koff..], (ks, 1), &ds, (1, lk), T::one(), &mut g.dq[f * lq..], qs);
        T::gemm(d, lq, lk, T::one(), qf, (qs, 1), &ds, (lk, 1), T::one(), &mut g.dk[koff..], ks);
    }
}

/// `dst += a ⊙ b`.
fn mul_add<T: Real>(dst: &mut [T], a: &[T], b: &[T]) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *d += x * y;
    }
}

/// Attention across frames at every position, vectorized over positions.
/// Returns the probabilities `[n (query), n (key), positions]`.
fn temporal_forward<T: Real>(q: &[T], k: &[T], v: &[T], shape: [usize; 4], out: &mut [T]) -> Vec<T> {
    let [d, n, h, w] = shape;
    let p = h * w;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let at = |c: usize, f: usize| (c * n + f) * p..(c * n + f + 1) * p;
    let mut probs = vec![T::zero(); n * n * p];
    for c in 0..d {
        for i in 0..n {
            let qi = &q[at(c, i)];
            for j in 0..n {
                mul_add(&mut probs[(i * n + j) * p..][..p], qi, &k[at(c, j)]);
            }
        }
    }
    probs.iter_mut().for_each(|s| *s *= scale);
    let mut max = vec![T::zero(); p];
    let mut sum = vec![T::zero(); p];
    for i in 0..n {
        let rows = &mut probs[i * n * p..(i + 1) * n * p];
        max.copy_from_slice(&rows[..p]);
        for j in 1..n {
            for (m, &s) in max.iter_mut().zip(&rows[j * p..(j + 1) * p]) {
                *m = m.max(s);
            }
        }
        sum.fill(T::zero());
        for j in 0..n {
            for ((s, &m), acc) in rows[j * p..(j + 1) * p].iter_mut().zip(&max).zip(sum.iter_mut()) {
                *s = (*s - m).exp();
                *acc += *s;
            }
        }
        sum.iter_mut().for_each(|s| *s = T::one() / *s);
        for j in 0..n {
            for (s, &inv) in rows[j * p..(j + 1) * p].iter_mut().zip(&sum) {
                *s *= inv;
            }
        }
    }
    for c in 0..d {
        for i in 0..n {
            for j in 0..n {
                mul_add(&mut out[at(c, i)], &probs[(i * n + j) * p..][..p], &v[at(c, j)]);
            }
        }
    }
    probs
}

fn temporal_backward<T: Real>(q: &[T], k: &[T], v: &[T], shape: [usize; 4], probs: &[T], dout: &[T], g: AttnGrads<'_, T>) {
    let [d, n, h, w] = shape;
    let p = h * w;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let at = |c: usize, f: usize| (c * n + f) * p..(c * n + f + 1) * p;
    let mut ds = vec![T::zero(); n * n * p];
    for c in 0..d {
        for i in 0..n {
            let doi = &dout[at(c, i)];
            for j in 0..n {
                let pij = &probs[(i * n + j) * p..][..p];
                mul_add(&mut g.dv[at(c, j)], pij, doi);
                mul_add(&mut ds[(i * n + j) * p..][..p], doi, &v[at(c, j)]);
            }
        }
    }
    let mut dot = vec![T::zero(); p];
    for i in 0..n {
        dot.fill(T::zero());
        for j in 0..n {
            let r = (i * n + j) * p..(i * n + j + 1) * p;
            mul_add(&mut dot, &probs[r.clone()], &ds[r]);
        }
        for j in 0..n {
            let r = (i * n + j) * p..(i * n + j + 1) * p;
            for ((x, &pr), &dt) in ds[r.clone()].iter_mut().zip(&probs[r]).zip(&dot) {
                *x = pr * (*x - dt) * scale;
            }
        }
    }
    for c in 0..d {
        for i in 0..n {
            for j in 0..n {
                let dsij = &ds[(i * n + j) * p..][..p];
                mul_add(&mut g.dq[at(c, i)], dsij, &k[at(c, j)]);
                mul_add(&mut g.dk[at(c, j)], dsij, &q[at(c, i)]);
            }
        }
    }
}
