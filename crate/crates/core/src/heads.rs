//! Output heads and the training loss.
//!
//! The heatmap head upsamples the finest decoder state back to target-image
//! resolution with stride-2 transposed convolutions; the action head pools the
//! state onto a small grid and classifies with a two-layer MLP. The loss is the
//! KL divergence from the ground-truth distribution to the softmax of the
//! predicted logits, plus cross-entropy on the action when one is annotated.

use afformer_autograd::{log_sum_exp, Ctx, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderState;
use crate::error::{Error, Result};
use crate::heatmaps::{sum_normalize, Heatmap, HeatmapKind};
use crate::metrics::bilinear_resize;
use crate::nn::{unflatten_tokens, Conv2d, Deconv2x, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsConfig {
    /// Number of action classes; `None` disables the action head.
    pub action_classes: Option<usize>,
    pub pool_grid: (usize, usize),
    pub heatmap_weight: f64,
    pub action_weight: f64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            action_classes: None,
            pool_grid: (1, 1),
            heatmap_weight: 1.0,
            action_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Upsampler {
    Deconvs(Vec<Deconv2x>),
    Pointwise(Conv2d),
}

/// Transposed-convolution stack from a level-`l_min` state to full resolution.
#[derive(Debug, Clone)]
pub struct HeatmapHead {
    up: Upsampler,
    l_min: u32,
}

impl HeatmapHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, l_min: u32, rng: &mut R) -> Self {
        let up = if l_min == 0 {
            Upsampler::Pointwise(Conv2d::new(store, "heads.heatmap.proj", channels, 1, 1, 1, 0, rng))
        } else {
            let mut c = channels;
            let deconvs = (0..l_min)
                .map(|i| {
                    let out = if i + 1 == l_min { 1 } else { (c / 2).max(1) };
                    let d = Deconv2x::new(store, &format!("heads.heatmap.deconv{}", i + 1), c, out, rng);
                    c = out;
                    d
                })
                .collect();
            Upsampler::Deconvs(deconvs)
        };
        Self { up, l_min }
    }

    /// `(1, 1, H, W)` logits.
    pub fn forward(&self, ctx: &mut Ctx, d: &DecoderState, target: (usize, usize)) -> Result<Var> {
        let s = 1usize << self.l_min;
        if (d.dims.0 * s, d.dims.1 * s) != target {
            return Err(Error::Shape(format!(
                "decoder state {}x{} at stride {s} does not reach {}x{}",
                d.dims.0, d.dims.1, target.0, target.1
            )));
        }
        let mut x = unflatten_tokens(ctx, d.tokens, d.dims.0, d.dims.1);
        match &self.up {
            Upsampler::Pointwise(c) => x = c.forward(ctx, x),
            Upsampler::Deconvs(ds) => {
                for (i, dc) in ds.iter().enumerate() {
                    x = dc.forward(ctx, x);
                    if i + 1 < ds.len() {
                        x = ctx.gelu(x);
                    }
                }
            }
        }
        Ok(x)
    }
}

/// Adaptive average pooling as a `(gh·gw, h·w)` matrix; bins follow
/// `[⌊i·n/g⌋, ⌈(i+1)·n/g⌉)`.
pub fn adaptive_pool_matrix(dims: (usize, usize), grid: (usize, usize)) -> Tensor {
    let bins = |n: usize, g: usize| -> Vec<(usize, usize)> {
        (0..g).map(|i| (i * n / g, ((i + 1) * n).div_ceil(g))).collect()
    };
    let (h, w) = dims;
    let (gh, gw) = grid;
    let mut m = vec![0.0; gh * gw * h * w];
    for (by, &(y0, y1)) in bins(h, gh).iter().enumerate() {
        for (bx, &(x0, x1)) in bins(w, gw).iter().enumerate() {
            let row = by * gw + bx;
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    m[row * h * w + y * w + x] = inv;
                }
            }
        }
    }
    Tensor::new(&[gh * gw, h * w], m)
}

#[derive(Debug, Clone, Copy)]
pub struct ActionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub grid: (usize, usize),
    pub classes: usize,
}

impl ActionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, classes: usize, grid: (usize, usize), rng: &mut R) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("action head needs at least 2 classes, got {classes}")));
        }
        if grid.0 == 0 || grid.1 == 0 {
            return Err(Error::Config("action pooling grid must be positive".into()));
        }
        let pooled = channels * grid.0 * grid.1;
        Ok(Self {
            fc1: Linear::new(store, "heads.action.fc1", pooled, channels, rng),
            fc2: Linear::new(store, "heads.action.fc2", channels, classes, rng),
            grid,
            classes,
        })
    }

    /// `(1, classes)` logits.
    pub fn forward(&self, ctx: &mut Ctx, d: &DecoderState) -> Result<Var> {
        let (h, w) = d.dims;
        if self.grid.0 > h || self.grid.1 > w {
            return Err(Error::Shape(format!("pooling grid {:?} larger than state {h}x{w}", self.grid)));
        }
        let c = ctx.shape(d.tokens)[1];
        let pool = ctx.constant(adaptive_pool_matrix(d.dims, self.grid));
        let pooled = ctx.matmul(pool, d.tokens);
        let flat = ctx.reshape(pooled, &[1, self.grid.0 * self.grid.1 * c]);
        let h1 = self.fc1.forward(ctx, flat);
        let h1 = ctx.gelu(h1);
        Ok(self.fc2.forward(ctx, h1))
    }
}

fn check_gt(gt: &Heatmap) -> Result<()> {
    if gt.kind() != HeatmapKind::SumNormalized {
        return Err(Error::DegenerateHeatmap("ground truth must be sum-normalized"));
    }
    Ok(())
}

/// `Σ_{g>0} g ln g`.
fn neg_entropy(gt: &Heatmap) -> f64 {
    gt.values().iter().filter(|&&g| g > 0.0).map(|g| g * g.ln()).sum()
}

/// `Σ_{g>0} g ln(g / softmax(h))`, with the softmax taken jointly over all
/// cells. Natural log.
pub fn heatmap_loss(gt: &Heatmap, pred: &Heatmap) -> Result<f64> {
    check_gt(gt)?;
    if gt.dims() != pred.dims() {
        return Err(Error::Shape(format!("heatmap loss: {:?} vs {:?}", gt.dims(), pred.dims())));
    }
    let lse = log_sum_exp(pred.values());
    let cross: f64 = gt
        .values()
        .iter()
        .zip(pred.values())
        .filter(|(g, _)| **g > 0.0)
        .map(|(g, h)| g * (h - lse))
        .sum();
    Ok(neg_entropy(gt) - cross)
}

/// Heatmap loss on the tape for logits of any shape holding `H·W` cells.
pub fn heatmap_loss_var(ctx: &mut Ctx, gt: &Heatmap, logits: Var) -> Result<Var> {
    check_gt(gt)?;
    let shape = ctx.shape(logits).to_vec();
    if shape.iter().product::<usize>() != gt.values().len() {
        return Err(Error::Shape(format!("heatmap loss: logits {shape:?} vs target {:?}", gt.dims())));
    }
    let ls = ctx.log_softmax(logits);
    let neg_g = Tensor::new(&shape, gt.values().iter().map(|g| -g).collect());
    let cross = ctx.dot_const(ls, neg_g);
    let c = ctx.constant(Tensor::scalar(neg_entropy(gt)));
    Ok(ctx.add(cross, c))
}

/// 1-D bilinear interpolation weights `(n_out, n_in)`, identical to
/// [`bilinear_resize`] along one axis.
pub fn interpolation_matrix(n_in: usize, n_out: usize) -> Tensor {
    let mut m = vec![0.0; n_out * n_in];
    for i in 0..n_in {
        let mut e = vec![0.0; n_in];
        e[i] = 1.0;
        let col = bilinear_resize(&e, 1, n_in, 1, n_out);
        for (o, v) in col.into_iter().enumerate() {
            m[o * n_in + i] = v;
        }
    }
    Tensor::new(&[n_out, n_in], m)
}

/// Bilinearly resized `(H, W)` logits on the tape, `M_h · L · M_wᵀ`.
pub fn resize_logits(ctx: &mut Ctx, logits: Var, from: (usize, usize), to: (usize, usize)) -> Var {
    if from == to {
        return ctx.reshape(logits, &[to.0, to.1]);
    }
    let l = ctx.reshape(logits, &[from.0, from.1]);
    let mh = ctx.constant(interpolation_matrix(from.0, to.0));
    let mw = ctx.constant(interpolation_matrix(from.1, to.1));
    let a = ctx.matmul(mh, l);
    ctx.matmul_t(a, mw)
}

/// Ground truth resized to `res` and renormalized.
pub fn resize_target(gt: &Heatmap, res: (usize, usize)) -> Result<Heatmap> {
    if gt.dims() == res {
        return Ok(gt.clone());
    }
    let v = bilinear_resize(gt.values(), gt.height(), gt.width(), res.0, res.1);
    sum_normalize(&Heatmap::raw(res.0, res.1, v)?)
}

/// `−log softmax(a)[label − 1]` for `(1, c)` logits and a 1-based label.
pub fn cross_entropy_var(ctx: &mut Ctx, logits: Var, label: usize) -> Result<Var> {
    let c = ctx.value(logits).len();
    if label < 1 || label > c {
        return Err(Error::ActionLabel { label, classes: c });
    }
    let ls = ctx.log_softmax(logits);
    let mut onehot = vec![0.0; c];
    onehot[label - 1] = -1.0;
    let shape = ctx.shape(logits).to_vec();
    Ok(ctx.dot_const(ls, Tensor::new(&shape, onehot)))
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label < 1 || label > logits.len() {
        return Err(Error::ActionLabel {
            label,
            classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label - 1])
}

/// Head outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PredictionVars {
    /// `(1, 1, H, W)` heatmap logits.
    pub heatmap: Var,
    pub dims: (usize, usize),
    /// `(1, c)` action logits.
    pub action: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub heatmap: Var,
    pub action: Option<Var>,
}

/// `w_h · L_h + w_a · L_a`. `supervise_at` resizes logits and target before
/// the heatmap term. Without an annotated action `L_a = 0`.
pub fn total_loss(
    ctx: &mut Ctx,
    out: &PredictionVars,
    gt: &Heatmap,
    gt_action: Option<usize>,
    cfg: &HeadsConfig,
    supervise_at: Option<(usize, usize)>,
) -> Result<LossVars> {
    if gt.dims() != out.dims {
        return Err(Error::Shape(format!("target {:?} vs prediction {:?}", gt.dims(), out.dims)));
    }
    let lh = match supervise_at {
        Some(res) if res != out.dims => {
            if res.0 > out.dims.0 || res.1 > out.dims.1 || res.0 == 0 || res.1 == 0 {
                return Err(Error::Config(format!("supervision resolution {res:?} outside 1..={:?}", out.dims)));
            }
            let small = resize_logits(ctx, out.heatmap, out.dims, res);
            heatmap_loss_var(ctx, &resize_target(gt, res)?, small)?
        }
        _ => heatmap_loss_var(ctx, gt, out.heatmap)?,
    };
    let lh_w = ctx.scale(lh, cfg.heatmap_weight);
    let (total, la) = match (out.action, gt_action) {
        (Some(a), Some(label)) => {
            let la = cross_entropy_var(ctx, a, label)?;
            let la_w = ctx.scale(la, cfg.action_weight);
            (ctx.add(lh_w, la_w), Some(la))
        }
        (None, Some(_)) => return Err(Error::ActionHeadAbsent),
        (_, None) => (lh_w, None),
    };
    Ok(LossVars {
        total,
        heatmap: lh,
        action: la,
    })
}

/// Gradient of [`heatmap_loss`] w.r.t. the logits: `softmax(h) · Σg − g`.
pub fn heatmap_loss_grad(gt: &Heatmap, pred: &Heatmap) -> Result<Vec<f64>> {
    check_gt(gt)?;
    if gt.dims() != pred.dims() {
        return Err(Error::Shape(format!("heatmap loss: {:?} vs {:?}", gt.dims(), pred.dims())));
    }
    let lse = log_sum_exp(pred.values());
    let mass = gt.sum();
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(h, g)| (h - lse).exp() * mass - g)
        .collect())
}

/// Softmax probabilities of a `(1, c)` logits var.
pub fn action_probabilities(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| (v - lse).exp()).collect()
}
