//! AdamW with global-norm gradient clipping and linear warmup.
//!
//! One optimizer owns a fixed subset of the parameters in a store, so several
//! optimizers can share a store and step independently.

use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 6e-5,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            warmup_steps: 100,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("gradient clip norm must be > 0".into()));
        }
        Ok(())
    }

    /// Learning rate applied at 1-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    params: Vec<String>,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore, params: Vec<String>) -> Result<Self> {
        config.validate()?;
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for name in &params {
            let n = store.value(name)?.len();
            first.insert(name.clone(), vec![0.0; n]);
            second.insert(name.clone(), vec![0.0; n]);
        }
        Ok(Self {
            config,
            step: 0,
            params,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[String] {
        &self.params
    }

    /// Global L2 norm of the owned gradients.
    pub fn grad_norm(&self, store: &ParamStore) -> Result<f64> {
        let mut sq = 0.0;
        for name in &self.params {
            sq += store.get(name)?.grad.l2_norm_sq();
        }
        Ok(sq.sqrt())
    }

    /// Applies one update from the accumulated gradients. Gradients are left in
    /// place; callers zero them before the next accumulation.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for name in &self.params {
            if store.get(name)?.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { param: name.clone() });
            }
        }
        let norm = self.grad_norm(store)?;
        let clip = if norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let cfg = self.config;
        let lr = cfg.lr_at(self.step);
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for name in &self.params {
            let p = store.get_mut(name)?;
            let decay = if p.decay { cfg.weight_decay } else { 0.0 };
            let m = self.first.get_mut(name).expect("moment for owned param");
            let v = self.second.get_mut(name).expect("moment for owned param");
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                let g = g * clip;
                *w -= lr * decay * *w;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![w]).unwrap(), true).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = scalar_store(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            warmup_steps: 0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &s, vec!["w".into()]).unwrap();
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.value("w").unwrap().data(), &[0.7]);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn clipping_scales_to_clip_norm() {
        // gradient (6, 8) has norm 10; after clipping it is (0.6, 0.8) and the
        // first Adam step moves each coordinate by lr * sign.
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![0.0, 0.0]).unwrap(), false).unwrap();
        s.get_mut("w").unwrap().grad = Tensor::vector(vec![6.0, 8.0]).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            warmup_steps: 0,
            eps: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &s, vec!["w".into()]).unwrap();
        assert!((opt.grad_norm(&s).unwrap() - 10.0).abs() < 1e-12);
        opt.step(&mut s).unwrap();
        let m = &opt.first["w"];
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((m[1] - 0.1 * 0.8).abs() < 1e-15);
        let v = &opt.second["w"];
        assert!((v[0] - 0.05 * 0.36).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        s.get_mut("w").unwrap().grad.data_mut()[0] = f64::NAN;
        let mut opt = AdamW::new(AdamWConfig::default(), &s, vec!["w".into()]).unwrap();
        match opt.step(&mut s) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        let cfg = AdamWConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..AdamWConfig::default()
        };
        let lrs: Vec<f64> = (1..=6).map(|s| cfg.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn three_steps_match_hand_trace() {
        // f(w) = 0.5 * (w - 3)^2, gradient w - 3.
        let cfg = AdamWConfig {
            lr: 0.1,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            warmup_steps: 2,
        };
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(cfg, &s, vec!["w".into()]).unwrap();

        // Reference trace written out step by step.
        let mut w: f64 = 1.0;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for step in 1..=3u32 {
            let raw = w - 3.0;
            let g = if raw.abs() > 1.0 { raw / raw.abs() } else { raw };
            let lr = if step < 2 { 0.1 * step as f64 / 2.0 } else { 0.1 };
            w -= lr * 0.1 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(step as i32));
            let vhat = v / (1.0 - 0.95f64.powi(step as i32));
            w -= lr * mhat / (vhat.sqrt() + 1e-8);

            let cur = s.value("w").unwrap().data()[0];
            s.get_mut("w").unwrap().grad.data_mut()[0] = cur - 3.0;
            opt.step(&mut s).unwrap();
            assert!((s.value("w").unwrap().data()[0] - w).abs() < 1e-10, "step {step}");
        }
    }
}
