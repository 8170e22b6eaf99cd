//! AdamW with decoupled weight decay and a one-cycle schedule.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::num::Real;
use crate::params::{ParamId, ParamStore};

/// One-cycle learning rate with inverse momentum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    /// Fraction of steps spent warming up.
    pub warmup_frac: f64,
    /// `lr(0) = max_lr / div_factor`.
    pub div_factor: f64,
    /// Final learning rate is `max_lr / final_div`.
    pub final_div: f64,
    pub momentum_min: f64,
    pub momentum_max: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        OneCycle {
            max_lr: 3e-3,
            total_steps: 1,
            warmup_frac: 0.3,
            div_factor: 25.0,
            final_div: 1e4,
            momentum_min: 0.85,
            momentum_max: 0.95,
        }
    }
}

impl OneCycle {
    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_frac * self.total_steps as f64).floor() as usize).min(self.total_steps.saturating_sub(1))
    }

    /// Progress through the current phase: `(warming up, fraction)`.
    fn phase(&self, step: usize) -> (bool, f64) {
        let warm = self.warmup_steps();
        let last = self.total_steps.saturating_sub(1);
        if step < warm {
            (true, step as f64 / warm as f64)
        } else if last > warm {
            (false, (step.min(last) - warm) as f64 / (last - warm) as f64)
        } else {
            (false, 0.0)
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let start = self.max_lr / self.div_factor;
        let end = self.max_lr / self.final_div;
        match self.phase(step) {
            (true, t) => start + (self.max_lr - start) * t,
            (false, t) => end + (self.max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
        }
    }

    /// First-moment coefficient; lowest where the learning rate peaks.
    pub fn momentum(&self, step: usize) -> f64 {
        let (lo, hi) = (self.momentum_min, self.momentum_max);
        match self.phase(step) {
            (true, t) => hi - (hi - lo) * t,
            (false, t) => hi - (hi - lo) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.01,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for the parameters that receive gradients.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Option<Array2<T>>>,
    v: Vec<Option<Array2<T>>>,
    /// Running products of the first-moment coefficients, for bias correction.
    beta1_power: f64,
    pub steps: usize,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: usize) -> Self {
        AdamW {
            config,
            m: vec![None; params],
            v: vec![None; params],
            beta1_power: 1.0,
            steps: 0,
        }
    }

    /// Applies one update; parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Array2<T>>], lr: f64, beta1: f64) {
        assert_eq!(grads.len(), store.len());
        self.steps += 1;
        self.beta1_power *= beta1;
        let b2 = self.config.beta2;
        let c1 = 1.0 - self.beta1_power;
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let (lr_t, b1_t, b2_t) = (T::lit(lr), T::lit(beta1), T::lit(b2));
        let decay = T::one() - T::lit(lr * self.config.weight_decay);
        let (c1, c2, eps) = (T::lit(c1), T::lit(c2), T::lit(self.config.eps));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut store.get_mut(ParamId(i)).value;
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1_t * *m + (T::one() - b1_t) * g;
                *v = b2_t * *v + (T::one() - b2_t) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p = *p * decay - lr_t * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
