//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use afformer_autograd::{ParamStore, Tensor};

use super::config::{OptimizerConfig, Schedule};
use crate::encoder::TRUNK_PREFIX;

/// `base · ½(1 + cos(π·i / total))` for cosine, `base` for constant.
pub fn learning_rate(schedule: Schedule, base: f64, iteration: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * iteration as f64 / total.max(1) as f64).cos()),
    }
}

/// Parameters of the spatial trunk train at a reduced rate.
pub fn is_backbone(name: &str) -> bool {
    name.starts_with(TRUNK_PREFIX)
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    backbone_factor: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, backbone_factor: f64, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            cfg,
            backbone_factor,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update at learning rate `lr`. `grads` follows store order; `None`
    /// means a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (eps, wd) = (self.cfg.eps, self.cfg.weight_decay);
        for (i, (name, p)) in params.iter_mut().enumerate() {
            let rate = if is_backbone(name) { lr * self.backbone_factor } else { lr };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].as_ref().map(Tensor::data);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *w -= rate * (update + wd * *w);
            }
        }
    }
}
