//! Adam with decoupled weight decay and the warmup/decay learning rate
//! schedule.

use crate::error::{RadflowError, Result};
use crate::tape::{Gradients, ParamStore};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled: applied as a multiplicative shrink, not through the
    /// moment estimates.
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            peak_lr: 1e-4,
            warmup_steps: 5000,
            epochs: 10,
            steps_per_epoch: 10000,
            clip_norm: 0.1,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// Warmup plus the scheduled epochs.
    pub fn total_steps(&self) -> usize {
        self.warmup_steps + self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RadflowError::InvalidConfig(msg));
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
            ("peak_lr", self.peak_lr),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return bad("beta1 and beta2 must be below 1".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, steps_per_epoch and batch_size must be positive".into());
        }
        if self.warmup_steps > self.total_steps() {
            return bad("warmup_steps exceeds the total step budget".into());
        }
        Ok(())
    }

    /// Linear 0 to peak over the warmup, then linear peak to 0 at the total
    /// step budget.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps();
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.peak_lr;
            }
            self.peak_lr * step as f64 / self.warmup_steps as f64
        } else if step >= total {
            0.0
        } else {
            self.peak_lr * (total - step) as f64 / (total - self.warmup_steps) as f64
        }
    }
}

/// First/second moment accumulators plus the step counter.
pub struct AdamW {
    config: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamW {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Self {
        let m = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            config,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update: decoupled shrink by (1 - lr * wd) on every parameter,
    /// then a bias-corrected Adam step. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        let c = &self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let shrink = 1.0 - lr * c.weight_decay;

        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let theta = store.get_mut(id);
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            if let Some(g) = grads.get(id) {
                if g.shape() != theta.shape() {
                    return Err(RadflowError::ShapeMismatch(format!(
                        "gradient shape {:?} against parameter shape {:?}",
                        g.shape(),
                        theta.shape()
                    )));
                }
                for (i, (&gi, th)) in g.data().iter().zip(theta.data_mut()).enumerate() {
                    *th *= shrink;
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    *th -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
                }
            } else {
                for (i, th) in theta.data_mut().iter_mut().enumerate() {
                    *th *= shrink;
                    m[i] *= c.beta1;
                    v[i] *= c.beta2;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    *th -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> (ParamStore, crate::tape::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1], vec![value]).unwrap());
        (store, id)
    }

    #[test]
    fn schedule_endpoints_and_interior() {
        let cfg = OptimConfig::default();
        assert_eq!(cfg.total_steps(), 105_000);
        assert_eq!(cfg.lr_at(0), 0.0);
        assert!((cfg.lr_at(2500) - 5e-5).abs() < 1e-18);
        assert!((cfg.lr_at(5000) - 1e-4).abs() < 1e-18);
        assert_eq!(cfg.lr_at(105_000), 0.0);
        assert_eq!(cfg.lr_at(200_000), 0.0);
        // Halfway through the decay leg.
        assert!((cfg.lr_at(55_000) - 5e-5).abs() < 1e-18);
        // Zero warmup starts at peak.
        let cfg = OptimConfig {
            warmup_steps: 0,
            ..OptimConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-4);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let (mut store, id) = single_param(1.0);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &[1], &[0.37]);
        opt.step(&mut store, &grads, 1e-3).unwrap();
        // Bias correction makes the first step lr * g/|g| up to epsilon.
        let moved = 1.0 - store.get(id).data()[0];
        assert!((moved - 1e-3).abs() < 1e-6);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradients_shrink_geometrically() {
        let (mut store, _) = single_param(2.0);
        let cfg = OptimConfig {
            weight_decay: 0.01,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let grads = Gradients::new(1);
        let lr = 0.5;
        for _ in 0..3 {
            opt.step(&mut store, &grads, lr).unwrap();
        }
        let expect = 2.0 * (1.0f64 - lr * 0.01).powi(3);
        let got = store.iter().next().unwrap().2.data()[0];
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_decay_and_zero_lr_leave_parameters_fixed() {
        let (mut store, id) = single_param(1.5);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg.clone(), &store);
        let grads = Gradients::new(1);
        opt.step(&mut store, &grads, 1e-3).unwrap();
        assert_eq!(store.get(id).data()[0], 1.5);

        let mut grads = Gradients::new(1);
        grads.accumulate(id, &[1], &[1.0]);
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &grads, 0.0).unwrap();
        assert_eq!(store.get(id).data()[0], 1.5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for patch in [
            |c: &mut OptimConfig| c.beta1 = 1.0,
            |c: &mut OptimConfig| c.peak_lr = 0.0,
            |c: &mut OptimConfig| c.clip_norm = -1.0,
            |c: &mut OptimConfig| c.weight_decay = -0.1,
            |c: &mut OptimConfig| c.batch_size = 0,
        ] {
            let mut cfg = OptimConfig::default();
            patch(&mut cfg);
            assert!(cfg.validate().is_err());
        }
        assert!(OptimConfig::default().validate().is_ok());
    }

    #[test]
    fn mismatched_gradient_shape_is_an_error() {
        let (mut store, id) = single_param(1.0);
        let mut opt = AdamW::new(OptimConfig::default(), &store);
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &[2], &[0.0, 0.0]);
        assert!(opt.step(&mut store, &grads, 1e-3).is_err());
    }
}
