//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

/// Linear warmup for `warmup_steps`, then cosine decay from `max_lr` to `min_lr` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

/// Fraction of the run spent warming up.
pub const WARMUP_FRACTION: f64 = 0.05;

impl Schedule {
    /// Warmup is `ceil(0.05 * total_steps)`, capped so at least one step decays.
    pub fn new(max_lr: f64, min_lr: f64, total_steps: usize) -> Result<Self> {
        let warmup = ((WARMUP_FRACTION * total_steps as f64).ceil() as usize).min(total_steps.saturating_sub(1));
        Self::with_warmup(max_lr, min_lr, total_steps, warmup)
    }

    pub fn with_warmup(max_lr: f64, min_lr: f64, total_steps: usize, warmup_steps: usize) -> Result<Self> {
        if !(min_lr > 0.0 && min_lr <= max_lr && max_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("need 0 < min_lr <= max_lr, got {min_lr} and {max_lr}")));
        }
        if warmup_steps >= total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup {warmup_steps} must be shorter than the {total_steps}-step run"
            )));
        }
        Ok(Self { max_lr, min_lr, total_steps, warmup_steps })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let (t, w, total) = (step, self.warmup_steps, self.total_steps);
        if t > total {
            return Err(Error::StepOutOfRange { step, total });
        }
        if t < w {
            return Ok(self.max_lr * (t + 1) as f64 / w as f64);
        }
        let progress = (t - w) as f64 / (total - w) as f64;
        Ok(self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update of every parameter at learning rate `lr`; gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (lr_t, eps) = (T::of(lr), T::of(c.eps));
        let decay = T::of(1.0 - lr * c.weight_decay);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.take().expect("checked above");
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let g = grad.data()[i];
                w[i] *= decay;
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
            debug_assert!(m.iter().chain(v.iter()).all(|x| x.is_finite()), "non-finite moments for {}", p.name);
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm().as_f64();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-6));
        for p in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn full() -> Schedule {
        Schedule::new(5e-6, 5e-7, 1000).unwrap()
    }

    #[test]
    fn warmup_length() {
        assert_eq!(full().warmup_steps, 50);
        assert_eq!(Schedule::new(1e-3, 1e-4, 30).unwrap().warmup_steps, 2);
        assert_eq!(Schedule::new(1e-3, 1e-4, 1).unwrap().warmup_steps, 0);
    }

    #[test]
    fn schedule_reference_points() {
        let s = full();
        assert!((s.lr_at(s.warmup_steps).unwrap() - 5e-6).abs() < 1e-18);
        assert!((s.lr_at(s.total_steps).unwrap() - 5e-7).abs() < 1e-18);
        let mid = s.warmup_steps + (s.total_steps - s.warmup_steps) / 2;
        assert!((s.lr_at(mid).unwrap() - 2.75e-6).abs() < 1e-18);
        assert!((s.lr_at(0).unwrap() - 1e-7).abs() < 1e-18);
        assert!((s.lr_at(s.warmup_steps - 1).unwrap() - 5e-6).abs() < 1e-18);
        assert!(matches!(s.lr_at(1001), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn schedule_monotone_after_warmup() {
        let s = full();
        let mut prev = f64::INFINITY;
        for t in s.warmup_steps..=s.total_steps {
            let lr = s.lr_at(t).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn invalid_schedules() {
        assert!(Schedule::new(1e-6, 1e-5, 10).is_err());
        assert!(Schedule::new(1e-5, 0.0, 10).is_err());
        assert!(Schedule::new(1e-5, 1e-6, 0).is_err());
        assert!(Schedule::with_warmup(1e-5, 1e-6, 10, 10).is_err());
    }

    fn scalar_store(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::new(&[1], vec![value]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut store = scalar_store(0.37);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..3 {
            store.iter_mut().for_each(|p| p.grad = Some(Tensor::zeros(&[1])));
            opt.step(&mut store, 1e-3).unwrap();
        }
        assert_eq!(store.iter().next().unwrap().value.data(), &[0.37]);
    }

    #[test]
    fn decay_only_step() {
        let mut store = scalar_store(2.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        store.iter_mut().for_each(|p| p.grad = Some(Tensor::zeros(&[1])));
        opt.step(&mut store, 0.01).unwrap();
        let w = store.iter().next().unwrap().value.data()[0];
        assert!((w - 2.0 * (1.0 - 0.01 * 0.05)).abs() < 1e-15);
        assert!(store.iter().all(|p| p.grad.is_none()));
    }

    /// Hand-rolled scalar AdamW trace.
    fn reference_trace(w0: f64, g: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for t in 1..=steps {
            w -= lr * wd * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn constant_gradient_trace() {
        let mut store = scalar_store(1.5);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        for _ in 0..7 {
            store.iter_mut().for_each(|p| p.grad = Some(Tensor::new(&[1], vec![0.3]).unwrap()));
            opt.step(&mut store, 0.01).unwrap();
        }
        let w = store.iter().next().unwrap().value.data()[0];
        assert!((w - reference_trace(1.5, 0.3, 0.01, 7)).abs() < 1e-14);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        assert!(matches!(opt.step(&mut store, 0.1), Err(Error::MissingGrad(n)) if n == "w"));
    }

    #[test]
    fn clipping() {
        let mut store = scalar_store(1.0);
        store.register("b", Tensor::zeros(&[1])).unwrap();
        store.get_mut(store.find("w").unwrap()).grad = Some(Tensor::new(&[1], vec![3.0]).unwrap());
        store.get_mut(store.find("b").unwrap()).grad = Some(Tensor::new(&[1], vec![4.0]).unwrap());
        let norm = clip_grad_norm(&mut store, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((store.grad_norm() - 1.0).abs() < 1e-6);
    }
}
