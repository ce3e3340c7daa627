//! Adam with decoupled weight decay.

use std::collections::HashMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    /// Plain Adam.
    pub fn adam() -> Self {
        Self {
            weight_decay: 0.0,
            ..Self::default()
        }
    }
}

/// Moment state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub lr: f64,
    step: u64,
    moments: HashMap<String, (Array2<F>, Array2<F>)>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: f64, config: AdamWConfig) -> Self {
        Self {
            config,
            lr,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Array2<F>, grad: &Array2<F>) {
        assert!(self.step > 0, "begin_step must precede update");
        assert_eq!(param.dim(), grad.dim(), "{name}: grad shape");
        let c = &self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let bc1 = F::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = F::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = F::lit(self.lr);
        let decay = F::one() - F::lit(self.lr * c.weight_decay);
        let eps = F::lit(c.eps);
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Array2::zeros(grad.dim()), Array2::zeros(grad.dim())));
        Zip::from(param)
            .and(grad)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p = *p * decay - lr * mh / (vh.sqrt() + eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = AdamW::<f64>::new(0.1, AdamWConfig::adam());
        let mut p = array![[1.0, -2.0, 0.5]];
        opt.begin_step();
        opt.update("p", &mut p, &array![[3.0, -0.01, 0.0]]);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-5);
        assert_eq!(p[[0, 2]], 0.5);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut opt = AdamW::<f64>::new(0.5, AdamWConfig {
            weight_decay: 0.2,
            ..AdamWConfig::default()
        });
        let mut p = array![[2.0]];
        opt.begin_step();
        opt.update("p", &mut p, &array![[0.0]]);
        assert!((p[[0, 0]] - 2.0 * 0.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::<f64>::new(0.05, AdamWConfig::adam());
        let mut p = array![[3.0, -4.0]];
        for _ in 0..2000 {
            let g = p.mapv(|v| 2.0 * (v - 1.0));
            opt.begin_step();
            opt.update("p", &mut p, &g);
        }
        assert!(p.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }
}
