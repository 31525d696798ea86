//! AdamW with decoupled weight decay and the warmup/cosine learning-rate
//! schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::math;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Updates every parameter from its stored gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let all = alloc::vec![true; store.len()];
        self.step_masked(store, lr, &all)
    }

    /// Like [`AdamW::step`] but leaves parameters with `trainable[i] == false`
    /// (and their moments) untouched. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step_masked(&mut self, store: &mut ParamStore, lr: f64, trainable: &[bool]) -> Result<()> {
        if trainable.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::LengthMismatch {
                left: trainable.len(),
                right: store.len(),
            });
        }
        for (id, p) in store.iter() {
            if !trainable[id.index()] {
                continue;
            }
            if let Some(index) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    name: p.name.clone(),
                    index,
                });
            }
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            weight_decay,
            eps,
        } = self.config;
        let c1 = 1.0 - math::powi(beta1, self.t as i32);
        let c2 = 1.0 - math::powi(beta2, self.t as i32);
        let decay = 1.0 - lr * weight_decay;
        for (i, p) in store.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (theta, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *theta = *theta * decay - lr * m_hat / (math::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrPolicy {
    #[default]
    WarmupCosine,
    Constant,
}

/// Learning-rate trajectory over `total_steps` optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub policy: LrPolicy,
}

impl Schedule {
    /// Peak 6e-5, final 6e-6, warmup over the first 0.1% of steps.
    pub fn paper(total_steps: usize) -> Self {
        Self {
            peak_lr: 6e-5,
            final_lr: 6e-6,
            warmup_fraction: 0.001,
            total_steps,
            policy: LrPolicy::WarmupCosine,
        }
    }

    pub fn constant(lr: f64, total_steps: usize) -> Self {
        Self {
            peak_lr: lr,
            final_lr: lr,
            warmup_fraction: 0.001,
            total_steps,
            policy: LrPolicy::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        match self.policy {
            LrPolicy::Constant if self.peak_lr >= 0.0 && self.peak_lr.is_finite() => Ok(()),
            LrPolicy::Constant => Err(Error::Config(format!("invalid lr {}", self.peak_lr))),
            LrPolicy::WarmupCosine => {
                if !(self.final_lr > 0.0 && self.final_lr <= self.peak_lr && self.peak_lr.is_finite()) {
                    return Err(Error::Config(format!(
                        "need 0 < final_lr <= peak_lr, got {} and {}",
                        self.final_lr, self.peak_lr
                    )));
                }
                if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "warmup_fraction must lie in (0, 1), got {}",
                        self.warmup_fraction
                    )));
                }
                Ok(())
            }
        }
    }

    /// `round(warmup_fraction * total_steps)`, at least one step.
    pub fn warmup_steps(&self) -> usize {
        let w = libm::round(self.warmup_fraction * self.total_steps as f64) as usize;
        w.clamp(1, self.total_steps)
    }

    /// Learning rate applied on optimizer step `step` (`0..=total_steps`).
    pub fn lr_at_step(&self, step: usize) -> f64 {
        if self.policy == LrPolicy::Constant {
            return self.peak_lr;
        }
        let step = step.min(self.total_steps);
        let warm = self.warmup_steps();
        if step <= warm {
            return self.peak_lr * (step as f64 / warm as f64);
        }
        let span = (self.total_steps - warm) as f64;
        let progress = (step - warm) as f64 / span;
        let w = 0.5 * (1.0 + math::cos(core::f64::consts::PI * progress));
        self.peak_lr * w + self.final_lr * (1.0 - w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::scalar(theta)).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        s.iter_mut().next().unwrap().grad.data_mut()[0] = g;
    }

    fn theta(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().1.value.data()[0]
    }

    #[test]
    fn zero_gradient_decays_exactly() {
        let mut s = scalar_store(2.0);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s, 0.01).unwrap();
        assert_eq!(theta(&s), 2.0 * (1.0 - 0.01 * 0.1));
        assert_eq!(opt.m[0].data()[0], 0.0);
        assert_eq!(opt.v[0].data()[0], 0.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        set_grad(&mut s, -3.0);
        opt.step(&mut s, 0.1).unwrap();
        assert!((theta(&s) - 1.1).abs() < 1e-8);
    }

    #[test]
    fn matches_scalar_reference() {
        let cfg = AdamWConfig::default();
        let mut s = scalar_store(0.7);
        let mut opt = AdamW::new(&s, cfg);
        let (mut th, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        let lr = 0.05;
        for t in 1..=3 {
            let g = th;
            let cur = theta(&s);
            set_grad(&mut s, cur);
            opt.step(&mut s, lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            th = th * (1.0 - lr * 0.1) - lr * mh / (vh.sqrt() + 1e-8);
            assert!((theta(&s) - th).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        set_grad(&mut s, f64::NAN);
        assert_eq!(
            opt.step(&mut s, 0.1),
            Err(Error::NonFinite {
                name: "theta".into(),
                index: 0
            })
        );
        assert_eq!(theta(&s), 1.0);
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut s = scalar_store(1.0);
        s.add("other", Tensor::scalar(1.0)).unwrap();
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        s.iter_mut().for_each(|p| p.grad.data_mut()[0] = 1.0);
        opt.step_masked(&mut s, 0.1, &[false, true]).unwrap();
        let vals: Vec<f64> = s.iter().map(|(_, p)| p.value.data()[0]).collect();
        assert_eq!(vals[0], 1.0);
        assert!(vals[1] < 1.0);
    }

    #[test]
    fn quadratic_bowl_descends() {
        let mut s = scalar_store(3.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        let mut prev = 4.5;
        for _ in 0..100 {
            let cur = theta(&s);
            set_grad(&mut s, cur);
            opt.step(&mut s, 0.01).unwrap();
            let loss = 0.5 * theta(&s) * theta(&s);
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::paper(10_000);
        s.validate().unwrap();
        assert_eq!(s.warmup_steps(), 10);
        assert_eq!(s.lr_at_step(0), 0.0);
        assert_eq!(s.lr_at_step(10), 6e-5);
        assert_eq!(s.lr_at_step(10_000), 6e-6);
        assert!((s.lr_at_step(5) - 3e-5).abs() < 1e-20);
        let mid = s.lr_at_step(10 + 9990 / 2);
        assert!((mid - 3.3e-5).abs() < 1e-15);
        let lrs: Vec<f64> = (10..=10_000).map(|k| s.lr_at_step(k)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn schedule_validation() {
        let mut s = Schedule::paper(100);
        s.final_lr = 1.0;
        assert!(s.validate().is_err());
        assert!(Schedule::constant(0.0, 5).validate().is_ok());
        assert_eq!(Schedule::constant(0.0, 5).lr_at_step(3), 0.0);
    }
}
