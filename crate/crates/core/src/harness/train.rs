//! The optimization loop.

use std::fs;
use std::io::Write;
use std::path::Path;

use afformer_autograd::{Ctx, ParamStore, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{PrecisionMode, RunConfig, RunMode};
use super::dataset::{action_classes, Sample};
use super::optim::{learning_rate, AdamW};
use crate::error::{Error, Result};
use crate::heads::total_loss;
use crate::model::Afformer;

/// One line of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub heatmap_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Parameters copied by name into the fresh model before training.
    pub init: Option<&'a ParamStore>,
    /// Stop after the first iteration whose batch loss is at or below this.
    pub stop_below: Option<f64>,
    /// Loss trace, written as JSON lines while training.
    pub trace_path: Option<&'a Path>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Afformer,
    pub trace: Vec<TraceRecord>,
    /// Iteration at which `stop_below` was met.
    pub reached_at: Option<usize>,
}

/// Per-sample losses and gradients in store order.
pub struct SampleGrad {
    pub loss: f64,
    pub heatmap_loss: f64,
    pub action_loss: Option<f64>,
    pub grads: Vec<Option<Tensor>>,
}

pub fn sample_gradient(model: &Afformer, sample: &Sample, cfg: &RunConfig) -> Result<SampleGrad> {
    let action = if model.has_action_head() { sample.action } else { None };
    let mut ctx = Ctx::new(model.params());
    let out = model.forward(&mut ctx, &sample.clip, &sample.image, None)?;
    let l = total_loss(
        &mut ctx,
        &out,
        &sample.heatmap,
        action,
        &model.config().heads,
        cfg.supervision_resolution(),
    )?;
    let loss = ctx.value(l.total).item();
    let heatmap_loss = ctx.value(l.heatmap).item();
    let action_loss = l.action.map(|a| ctx.value(a).item());
    let mut g = ctx.backward(l.total);
    Ok(SampleGrad {
        loss,
        heatmap_loss,
        action_loss,
        grads: ctx.param_grads(&mut g),
    })
}

/// Mean batch loss without gradients.
pub fn dataset_loss(model: &Afformer, samples: &[Sample], cfg: &RunConfig) -> Result<f64> {
    let losses = samples
        .par_iter()
        .map(|s| {
            let action = if model.has_action_head() { s.action } else { None };
            let mut ctx = Ctx::inference(model.params());
            let out = model.forward(&mut ctx, &s.clip, &s.image, None)?;
            let l = total_loss(&mut ctx, &out, &s.heatmap, action, &model.config().heads, cfg.supervision_resolution())?;
            Ok(ctx.value(l.total).item())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Batch schedule: reshuffled passes over the data; the whole set every
/// iteration when the batch covers it.
struct Batches {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            n,
            batch,
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0ba7c4),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.batch >= self.n {
            return (0..self.n).collect();
        }
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.n {
                for i in (1..self.n).rev() {
                    let j = self.rng.random_range(0..=i);
                    self.order.swap(i, j);
                }
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub fn build_model(cfg: &RunConfig, samples: &[Sample]) -> Result<Afformer> {
    let classes = match cfg.mode {
        RunMode::MaskahandPretrain => None,
        _ => cfg.action_classes.or_else(|| action_classes(samples).map(|c| c.max(2))),
    };
    let model = Afformer::new(cfg.model_config(classes), cfg.seed)?;
    if cfg.mode == RunMode::MaskahandPretrain {
        assert!(!model.has_action_head(), "pretraining never builds an action head");
    }
    Ok(model)
}

pub fn train(cfg: &RunConfig, samples: &[Sample], opts: &TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.precision.train == PrecisionMode::Mixed16 {
        log::warn!("mixed precision requested; this build trains in 64-bit");
    }
    let mut model = build_model(cfg, samples)?;
    if let Some(init) = opts.init {
        model.load_params(init)?;
    }
    let iters = cfg.iterations_for(samples.len());
    let mut opt = AdamW::new(cfg.optimizer.clone(), cfg.backbone_lr_factor, model.params());
    let mut batches = Batches::new(samples.len(), cfg.batch_size, cfg.seed);
    let mut trace = Vec::with_capacity(iters);
    let mut trace_file = match opts.trace_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some((fs::File::create(p).map_err(|e| Error::io(p, e))?, p))
        }
        None => None,
    };
    let mut reached_at = None;
    for it in 0..iters {
        let idx = batches.next();
        let per_sample = idx
            .par_iter()
            .map(|&i| sample_gradient(&model, &samples[i], cfg))
            .collect::<Result<Vec<_>>>()?;
        let b = per_sample.len() as f64;
        let mut grads: Vec<Option<Tensor>> = vec![None; model.params().len()];
        let (mut loss, mut lh, mut la, mut has_la) = (0.0, 0.0, 0.0, false);
        for s in per_sample {
            loss += s.loss;
            lh += s.heatmap_loss;
            if let Some(a) = s.action_loss {
                la += a;
                has_la = true;
            }
            for (acc, g) in grads.iter_mut().zip(s.grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v /= b);
        }
        let lr = learning_rate(cfg.schedule, cfg.optimizer.lr, it, iters);
        let rec = TraceRecord {
            iteration: it,
            lr,
            loss: loss / b,
            heatmap_loss: lh / b,
            action_loss: has_la.then_some(la / b),
        };
        if let Some((f, p)) = trace_file.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::format(*p, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(*p, e))?;
        }
        let finite = rec.loss.is_finite();
        let mean = rec.loss;
        trace.push(rec);
        if !finite {
            return Err(Error::Diverged { iteration: it, loss: mean });
        }
        if cfg.log_every > 0 && it % cfg.log_every == 0 {
            log::info!("iteration {it}: loss {mean:.5} lr {lr:.3e}");
        }
        if let Some(t) = opts.stop_below {
            if mean <= t {
                reached_at = Some(it);
                break;
            }
        }
        opt.step(model.params_mut(), &grads, lr);
    }
    Ok(TrainOutcome { model, trace, reached_at })
}
