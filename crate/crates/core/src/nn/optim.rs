use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::nn::params::{Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`; returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> f64 {
        let norm = grads.global_norm();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max && norm > 0.0 => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, slot) in grads.slots().iter().enumerate() {
            let Some(g) = slot else { continue };
            let id = store.ids().nth(i).expect("gradient slot without parameter");
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv * clip;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *pv);
            }
        }
        norm
    }
}

/// Linear warmup then cosine decay to `min_ratio · base`.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize, min_ratio: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (min_ratio + (1.0 - min_ratio) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::row_vector(&[3.0, -2.0]));
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                clip_norm: None,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.param(id);
                let t = g.constant(Matrix::row_vector(&[1.0, 0.5]));
                let d = g.sub(x, t);
                let s = g.square(d);
                let l = g.sum_all(s);
                g.backward(l).into_param_grads()
            };
            opt.step(&mut store, &grads, 0.05);
        }
        let x = store.get(id);
        assert!((x[(0, 0)] - 1.0).abs() < 1e-3 && (x[(0, 1)] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(1.0, 0, 100, 10, 0.1) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, 100, 10, 0.1) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 100, 100, 10, 0.1) - 0.1).abs() < 1e-12);
    }
}
