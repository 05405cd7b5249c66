//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`] walks
//! the nodes in reverse and accumulates adjoints. Nodes that do not depend on a
//! differentiable leaf are skipped entirely.

use std::sync::Arc;

use crate::tensor::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index value that makes [`Tape::gather`] emit a zero.
pub const GATHER_ZERO: usize = usize::MAX;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    SoftmaxRows(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Sum(Var),
    Dot(Var, Tensor),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// `x[m, n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let (m, n) = vx.dims2();
        assert_eq!(vb.len(), n, "add_row: bias length");
        let mut data = vx.data().to_vec();
        for r in 0..m {
            for (d, bv) in data[r * n..(r + 1) * n].iter_mut().zip(vb.data()) {
                *d += bv;
            }
        }
        let t = Tensor::new(&[m, n], data);
        let ng = self.ng(&[x, b]);
        self.push(t, Op::AddRow(x, b), ng)
    }

    /// `a[m, k] · b[k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2();
        let (k2, n) = vb.dims2();
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm_nn(va.data(), vb.data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), ng)
    }

    /// `a[m, k] · b[n, k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2();
        let (n, k2) = vb.dims2();
        assert_eq!(k, k2, "matmul_t: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm_nt(va.data(), vb.data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(&[m, n], out), Op::MatMulT(a, b), ng)
    }

    /// Softmax along the last axis of a rank-2 tensor, max-stabilized.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (m, n) = vx.dims2();
        let mut data = vx.data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[m, n], data), Op::SoftmaxRows(x), ng)
    }

    /// Log-softmax jointly over every element, keeping the input shape.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let lse = log_sum_exp(vx.data());
        let t = vx.map(|v| v - lse);
        let ng = self.ng(&[x]);
        self.push(t, Op::LogSoftmax(x), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length n.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = vx.dims2();
        assert_eq!(vg.len(), n);
        assert_eq!(vb.len(), n);
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::new(&[m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(&[m, n], xhat),
                rstd,
            },
            ng,
        )
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| {
            let u = GELU_C * (v + GELU_A * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        let ng = self.ng(&[x]);
        self.push(t, Op::Gelu(x), ng)
    }

    /// `out.flat[i] = x.flat[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(shape.iter().product::<usize>(), index.len());
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { vx.data()[i] })
            .collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, data), Op::Gather { x, index }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(&[x]);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Batched convolution: `x[N, Ci, H, W]`, `w[Co, Ci, kh, kw]`, optional `b[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, ci, h, wd) = vx.dims4();
        let (co, ci2, kh, kw) = vw.dims4();
        assert_eq!(ci, ci2, "conv2d: channel mismatch");
        let geom = ConvGeom {
            in_channels: ci,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let (oh, ow) = geom.out_hw();
        let p = oh * ow;
        let k = ci * kh * kw;
        let mut out = vec![0.0; n * co * p];
        for b_i in 0..n {
            let cols = im2col(&vx.data()[b_i * ci * h * wd..(b_i + 1) * ci * h * wd], &geom);
            let dst = &mut out[b_i * co * p..(b_i + 1) * co * p];
            gemm_nn(vw.data(), &cols, dst, co, k, p);
            if let Some(bv) = b {
                let bias = self.value(bv).data();
                for c in 0..co {
                    for v in &mut dst[c * p..(c + 1) * p] {
                        *v += bias[c];
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(
            Tensor::new(&[n, co, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            ng,
        )
    }

    /// Batched transposed convolution: `x[N, Ci, H, W]`, `w[Ci, Co, kh, kw]`.
    /// Output spatial size is `(H - 1) * stride - 2 * padding + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, ci, h, wd) = vx.dims4();
        let (ci2, co, kh, kw) = vw.dims4();
        assert_eq!(ci, ci2, "conv_transpose2d: channel mismatch");
        let geom = convt_geom(co, h, wd, kh, kw, stride, padding);
        let (oh, ow) = (geom.height, geom.width);
        let krows = co * kh * kw;
        let mut out = vec![0.0; n * co * oh * ow];
        for b_i in 0..n {
            let xs = &vx.data()[b_i * ci * h * wd..(b_i + 1) * ci * h * wd];
            let mut cols = vec![0.0; krows * h * wd];
            gemm_tn(vw.data(), xs, &mut cols, krows, ci, h * wd);
            let dst = &mut out[b_i * co * oh * ow..(b_i + 1) * co * oh * ow];
            col2im(&cols, &geom, dst);
            if let Some(bv) = b {
                let bias = self.value(bv).data();
                for c in 0..co {
                    for v in &mut dst[c * oh * ow..(c + 1) * oh * ow] {
                        *v += bias[c];
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(
            Tensor::new(&[n, co, oh, ow], out),
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(t, Op::Sum(x), ng)
    }

    /// `Σ x ⊙ c` for a constant `c` of the same shape.
    pub fn dot_const(&mut self, x: Var, c: Tensor) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), c.shape(), "dot_const: shape mismatch");
        let s = vx.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Dot(x, c), ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape(), d));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let (m, n) = g.dims2();
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (acc, v) in gb.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(&shape, gb));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2();
                let n = vb.dims2().1;
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), vb.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(va.data(), g.data(), &mut gb, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], gb));
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2();
                let n = vb.dims2().0;
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nn(g.data(), vb.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; n * k];
                    gemm_tn(g.data(), va.data(), &mut gb, n, m, k);
                    self.accumulate(grads, *b, Tensor::new(&[n, k], gb));
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (m, n) = y.dims2();
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[m, n], gx));
            }
            Op::LogSoftmax(x) => {
                let gsum = g.sum();
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(y, gv)| gv - y.exp() * gsum)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = g.dims2();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g.data()[r * n + j];
                            gg[j] += gv * xhat.data()[r * n + j];
                            gb[j] += gv;
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(&gshape, gg));
                    self.accumulate(grads, *beta, Tensor::new(&bshape, gb));
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        let xh = &xhat.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            gx[r * n + j] = rstd[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(&[m, n], gx));
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, gv)| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(vx.shape(), d));
            }
            Op::Gather { x, index } => {
                let vx = self.value(*x);
                let mut gx = vec![0.0; vx.len()];
                for (&i, gv) in index.iter().zip(g.data()) {
                    if i != GATHER_ZERO {
                        gx[i] += gv;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape(), gx));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, ci, h, wd) = vx.dims4();
                let (co, _, kh, kw) = vw.dims4();
                let geom = ConvGeom {
                    in_channels: ci,
                    height: h,
                    width: wd,
                    kernel_h: kh,
                    kernel_w: kw,
                    stride: *stride,
                    padding: *padding,
                };
                let (oh, ow) = geom.out_hw();
                let p = oh * ow;
                let k = ci * kh * kw;
                let mut gw = vec![0.0; co * k];
                let mut gx = vec![0.0; vx.len()];
                let mut gb = vec![0.0; co];
                for b_i in 0..n {
                    let gs = &g.data()[b_i * co * p..(b_i + 1) * co * p];
                    let xs = &vx.data()[b_i * ci * h * wd..(b_i + 1) * ci * h * wd];
                    if self.wants(*w) {
                        let cols = im2col(xs, &geom);
                        gemm_nt(gs, &cols, &mut gw, co, p, k);
                    }
                    if self.wants(*x) {
                        let mut gcols = vec![0.0; k * p];
                        gemm_tn(vw.data(), gs, &mut gcols, k, co, p);
                        col2im(&gcols, &geom, &mut gx[b_i * ci * h * wd..(b_i + 1) * ci * h * wd]);
                    }
                    for c in 0..co {
                        gb[c] += gs[c * p..(c + 1) * p].iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape(), gx));
                self.accumulate(grads, *w, Tensor::new(vw.shape(), gw));
                if let Some(bv) = b {
                    let shape = self.value(*bv).shape().to_vec();
                    self.accumulate(grads, *bv, Tensor::new(&shape, gb));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, ci, h, wd) = vx.dims4();
                let (_, co, kh, kw) = vw.dims4();
                let geom = convt_geom(co, h, wd, kh, kw, *stride, *padding);
                let (oh, ow) = (geom.height, geom.width);
                let krows = co * kh * kw;
                let mut gw = vec![0.0; vw.len()];
                let mut gx = vec![0.0; vx.len()];
                let mut gb = vec![0.0; co];
                for b_i in 0..n {
                    let gs = &g.data()[b_i * co * oh * ow..(b_i + 1) * co * oh * ow];
                    let gcols = im2col(gs, &geom);
                    let xs = &vx.data()[b_i * ci * h * wd..(b_i + 1) * ci * h * wd];
                    if self.wants(*x) {
                        gemm_nn(
                            vw.data(),
                            &gcols,
                            &mut gx[b_i * ci * h * wd..(b_i + 1) * ci * h * wd],
                            ci,
                            krows,
                            h * wd,
                        );
                    }
                    if self.wants(*w) {
                        gemm_nt(xs, &gcols, &mut gw, ci, h * wd, krows);
                    }
                    for c in 0..co {
                        gb[c] += gs[c * oh * ow..(c + 1) * oh * ow].iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape(), gx));
                self.accumulate(grads, *w, Tensor::new(vw.shape(), gw));
                if let Some(bv) = b {
                    let shape = self.value(*bv).shape().to_vec();
                    self.accumulate(grads, *bv, Tensor::new(&shape, gb));
                }
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Dot(x, c) => {
                let gv = g.item();
                self.accumulate(grads, *x, c.map(|v| v * gv));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape));
            }
        }
    }
}

fn convt_geom(
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> ConvGeom {
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    assert!(oh > 2 * padding && ow > 2 * padding, "conv_transpose2d: padding too large");
    ConvGeom {
        in_channels: co,
        height: oh - 2 * padding,
        width: ow - 2 * padding,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    }
}

/// Max-stabilized in-place softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in xs.iter_mut() {
        *v /= total;
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
