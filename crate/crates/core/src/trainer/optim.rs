//! Learning-rate schedule and the AdamW optimizer.

use serde::{Deserialize, Serialize};

use crate::model::params::{Grads, ParamStore};
use crate::tensor::Real;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Global-norm gradient clipping; off when `None`.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl OptimConfig {
    /// Full-scale pretraining settings.
    pub fn full() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_steps: 4000,
            total_steps: 100_000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 512,
            grad_clip: None,
        }
    }

    /// Settings for the single-core desk model.
    pub fn desk() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 200,
            total_steps: 2000,
            batch_size: 64,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr > 0.0
            && self.warmup_steps > 0
            && self.warmup_steps < self.total_steps
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0
/// at `total` steps.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step <= warmup {
        if warmup == 0 {
            peak
        } else {
            peak * step as f64 / warmup as f64
        }
    } else if step >= total {
        0.0
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

pub fn lr_at(step: usize, cfg: &OptimConfig) -> f64 {
    lr_schedule(step, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps)
}

/// AdamW with bias-corrected moments and decoupled weight decay applied to
/// parameters flagged for decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_config(params: &ParamStore<T>, cfg: &OptimConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let decay = T::of(1.0 - lr * self.weight_decay);
        let lr_t = T::of(lr);
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.data).zip(&mut self.m).zip(&mut self.v) {
            let apply_decay = p.decay && self.weight_decay > 0.0;
            for (((x, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                if apply_decay {
                    *x *= decay;
                }
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mhat = *mi * inv_bc1;
                let vhat = *vi * inv_bc2;
                *x -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

/// Index of the minimum validation loss; ties go to the earliest entry.
pub fn select_checkpoint(valid_losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in valid_losses.iter().enumerate() {
        if l.is_nan() {
            continue;
        }
        if best.is_none_or(|b| l < valid_losses[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;
    use crate::model::params::Init;

    #[test]
    fn schedule_points() {
        let c = OptimConfig::full();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(4000, &c), 1e-4);
        assert!((lr_at(52_000, &c) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(100_000, &c), 0.0);
        assert_eq!(lr_at(200_000, &c), 0.0);
        let peak = (0..=100_000).map(|s| lr_at(s, &c)).fold(0.0, f64::max);
        assert_eq!(peak, 1e-4);
    }

    proptest! {
        #[test]
        fn schedule_is_continuous_and_bounded(warmup in 1usize..500, extra in 1usize..5000, step in 0usize..6000) {
            let total = warmup + extra;
            let a = lr_schedule(step, 1.0, warmup, total);
            let b = lr_schedule(step + 1, 1.0, warmup, total);
            prop_assert!((0.0..=1.0).contains(&a));
            let slope = 1.0 / warmup.min(extra) as f64;
            prop_assert!((a - b).abs() <= slope + 1e-12);
        }
    }

    fn scalar_store(x: f32, decay: bool) -> ParamStore<f32> {
        let mut ps = ParamStore::new();
        let mut rng = crate::rng::Rng::seed_from_u64(0);
        let id = ps.add("w", &[1], Init::Zeros, decay, &mut rng);
        ps.get_mut(id)[0] = x;
        ps
    }

    #[test]
    fn single_scalar_step_matches_hand_arithmetic() {
        let mut ps = scalar_store(1.0, true);
        let mut opt = AdamW::new(&ps, 0.9, 0.98, 1e-8, 0.01);
        let grads = Grads { data: vec![vec![0.5f32]] };
        opt.step(&mut ps, &grads, 0.1);
        // decay: 1 - 0.1*0.01 = 0.999; m̂ = 0.5, v̂ = 0.25
        let expected = 0.999 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((ps.iter().next().unwrap().data[0] as f64 - expected).abs() < 1e-7);

        opt.step(&mut ps, &grads, 0.1);
        let m: f64 = 0.9 * 0.05 + 0.1 * 0.5;
        let v: f64 = 0.98 * 0.005 + 0.02 * 0.25;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.9604);
        let expected2 = expected * 0.999 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((ps.iter().next().unwrap().data[0] as f64 - expected2).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut ps = scalar_store(0.7, true);
        let mut opt = AdamW::new(&ps, 0.9, 0.98, 1e-8, 0.0);
        opt.step(&mut ps, &Grads { data: vec![vec![0.0f32]] }, 1e-3);
        assert_eq!(ps.iter().next().unwrap().data[0], 0.7);
    }

    #[test]
    fn exempt_parameters_are_not_decayed() {
        let mut ps = scalar_store(0.7, false);
        let mut opt = AdamW::new(&ps, 0.9, 0.98, 1e-8, 0.5);
        opt.step(&mut ps, &Grads { data: vec![vec![0.0f32]] }, 1e-3);
        assert_eq!(ps.iter().next().unwrap().data[0], 0.7);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = Grads { data: vec![vec![3.0f64, 4.0]] };
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_selection() {
        assert_eq!(select_checkpoint(&[2.0, 1.5, 1.7]), Some(1));
        assert_eq!(select_checkpoint(&[1.0, 1.0]), Some(0));
        assert_eq!(select_checkpoint(&[]), None);
    }

    proptest! {
        #[test]
        fn selection_matches_scan_oracle(xs in proptest::collection::vec(0u8..6, 1..30)) {
            let losses: Vec<f64> = xs.iter().map(|&x| x as f64 * 0.5).collect();
            let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
            let oracle = losses.iter().position(|&l| l == min);
            prop_assert_eq!(select_checkpoint(&losses), oracle);
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::full().validate().is_ok());
        assert!(OptimConfig::desk().validate().is_ok());
        let bad = OptimConfig {
            warmup_steps: 5000,
            ..OptimConfig::desk()
        };
        assert!(bad.validate().is_err());
    }
}
