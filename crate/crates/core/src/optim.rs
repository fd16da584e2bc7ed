//! AdamW, global-norm clipping, warmup-cosine schedule and EMA.

use serde::{Deserialize, Serialize};

use crate::container::{Archive, Array};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup: u64,
    pub total: u64,
    pub floor_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-4,
            warmup: 8000,
            total: 120_000,
            floor_lr: 0.0,
        }
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to the floor at
/// `total`; steps past `total` stay at the floor.
pub fn lr_schedule(step: u64, cfg: &ScheduleConfig) -> f64 {
    let step = step.min(cfg.total);
    if step < cfg.warmup {
        return cfg.peak_lr * step as f64 / cfg.warmup as f64;
    }
    let span = cfg.total.saturating_sub(cfg.warmup);
    if span == 0 {
        return cfg.peak_lr;
    }
    let frac = (step - cfg.warmup) as f64 / span as f64;
    cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / (norm + 1e-12)) as f32;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::State("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p = *p * decay - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn save_into(&self, ar: &mut Archive, prefix: &str, params: &ParamStore<f32>) {
        ar.push(format!("{prefix}step"), Array::text(&self.step.to_string()));
        for ((_, name, _), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            ar.push(format!("{prefix}m/{name}"), Array::from_tensor(m));
            ar.push(format!("{prefix}v/{name}"), Array::from_tensor(v));
        }
    }

    pub fn load_from(&mut self, ar: &Archive, prefix: &str, params: &ParamStore<f32>) -> Result<()> {
        self.step = ar
            .require(&format!("{prefix}step"))?
            .as_text()?
            .parse()
            .map_err(|_| Error::State("bad optimizer step".into()))?;
        for (i, (_, name, t)) in params.iter().enumerate() {
            let m = ar.require(&format!("{prefix}m/{name}"))?.to_tensor()?;
            let v = ar.require(&format!("{prefix}v/{name}"))?.to_tensor()?;
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::State(format!("optimizer moments for {name} have the wrong shape")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`, elementwise.
pub fn ema_update(shadow: &mut ParamStore<f32>, params: &ParamStore<f32>, decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::validation("EMA shadow and parameters differ in count"));
    }
    let d = decay as f32;
    let c = (1.0 - decay) as f32;
    for (s, p) in shadow.tensors_mut().iter_mut().zip(params.tensors()) {
        if s.shape() != p.shape() {
            return Err(Error::validation(format!("EMA shape mismatch {:?} vs {:?}", s.shape(), p.shape())));
        }
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = d * *a + c * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let c = ScheduleConfig {
            peak_lr: 2e-4,
            warmup: 100,
            total: 1100,
            floor_lr: 0.0,
        };
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(100, &c), 2e-4);
        assert!((lr_schedule(600, &c) - 1e-4).abs() < 1e-18);
        assert!(lr_schedule(1100, &c).abs() < 1e-18);
        assert_eq!(lr_schedule(5000, &c), lr_schedule(1100, &c));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::from_vec(&[2], vec![3.0f32, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let n: f32 = g[0].data().iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(n <= 1.0 + 1e-6);
        let mut small = vec![Tensor::from_vec(&[1], vec![0.5f32]).unwrap()];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    fn store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::full(&[3], v));
        s
    }

    #[test]
    fn ema_closed_forms() {
        let p = store(2.0);
        let mut s = store(10.0);
        ema_update(&mut s, &p, 1.0).unwrap();
        assert_eq!(s.tensors()[0].data(), &[10.0; 3]);
        ema_update(&mut s, &p, 0.0).unwrap();
        assert_eq!(s.tensors()[0].data(), &[2.0; 3]);
        let mut s = store(10.0);
        let decay = 0.9;
        for _ in 0..20 {
            ema_update(&mut s, &p, decay).unwrap();
        }
        let expect = 2.0 + 0.9f64.powi(20) * 8.0;
        assert!((s.tensors()[0].data()[0] as f64 - expect).abs() < 1e-5);
        let mut bad = ParamStore::new();
        bad.insert("a", Tensor::<f32>::zeros(&[2]));
        assert!(matches!(ema_update(&mut bad, &p, 0.5), Err(Error::Validation(_))));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = store(1.0);
        let mut opt = AdamW::new(&p, 0.9, 0.95, 0.0);
        let g = vec![Tensor::from_vec(&[3], vec![1.0f32, -2.0, 0.0]).unwrap()];
        opt.update(&mut p, &g, 0.1).unwrap();
        let d = p.tensors()[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] - 1.1).abs() < 1e-6 && d[2] == 1.0);
    }
}
