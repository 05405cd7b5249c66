//! Parameterized layers on top of the autodiff tape.

use std::sync::Arc;

use afformer_autograd::{Ctx, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, RngExt};

/// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

/// `y = x · W + b` with `W: (in, out)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.register(format!("{name}.weight"), fan_in_uniform(&[in_dim, out_dim], in_dim, rng));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.matmul(x, w);
        ctx.add_row(y, b)
    }

    pub fn numel(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.register(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self {
            gamma,
            beta,
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.layer_norm(x, g, b, self.eps)
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.register(
            format!("{name}.weight"),
            fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            stride,
            padding,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    pub fn numel(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Stride-2 transposed convolution, kernel 4, padding 1: doubles `H` and `W`.
#[derive(Debug, Clone, Copy)]
pub struct Deconv2x {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Deconv2x {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            fan_in_uniform(&[in_channels, out_channels, 4, 4], in_channels * 4, rng),
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.conv_transpose2d(x, w, Some(b), 2, 1)
    }
}

/// `(N, C, h, w)` feature maps → `(N·h·w, C)` token rows, frame-major then
/// row-major within a frame.
pub fn flatten_tokens(ctx: &mut Ctx, x: Var) -> Var {
    let shape = ctx.shape(x).to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let mut index = Vec::with_capacity(n * hw * c);
    for f in 0..n {
        for p in 0..hw {
            for ch in 0..c {
                index.push((f * c + ch) * hw + p);
            }
        }
    }
    ctx.gather(x, Arc::from(index), &[n * hw, c])
}

/// Inverse of [`flatten_tokens`] for a single frame: `(h·w, C)` → `(1, C, h, w)`.
pub fn unflatten_tokens(ctx: &mut Ctx, x: Var, h: usize, w: usize) -> Var {
    let (n, c) = ctx.value(x).dims2();
    assert_eq!(n, h * w, "token count {n} vs grid {h}x{w}");
    let mut index = Vec::with_capacity(n * c);
    for ch in 0..c {
        for p in 0..n {
            index.push(p * c + ch);
        }
    }
    ctx.gather(x, Arc::from(index), &[1, c, h, w])
}

/// Columns `[start, start + len)` of a rank-2 var.
pub fn columns(ctx: &mut Ctx, x: Var, start: usize, len: usize) -> Var {
    let (m, n) = ctx.value(x).dims2();
    assert!(start + len <= n);
    let index: Vec<usize> = (0..m).flat_map(|r| (start..start + len).map(move |c| r * n + c)).collect();
    ctx.gather(x, Arc::from(index), &[m, len])
}

/// Rows `[start, start + len)` of a rank-2 var.
pub fn rows(ctx: &mut Ctx, x: Var, start: usize, len: usize) -> Var {
    let (m, n) = ctx.value(x).dims2();
    assert!(start + len <= m);
    let index: Vec<usize> = (start * n..(start + len) * n).collect();
    ctx.gather(x, Arc::from(index), &[len, n])
}
