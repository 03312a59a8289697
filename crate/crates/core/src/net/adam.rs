use serde::{Deserialize, Serialize};

use super::params::{ParamSet, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: ParamSet<F>,
    pub second_moment: ParamSet<F>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig, params: &ParamSet<F>) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.first_moment) {
            return Err(Error::Config("adam: parameter and gradient layouts differ".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr_t = c.learning_rate * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let bias2 = F::of((1.0 - c.beta2.powi(t)).sqrt());
        let lr_t = F::of(lr_t);
        let eps = F::of(c.epsilon);

        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.first_moment.tensors)
            .zip(&mut self.second_moment.tensors)
        {
            for (((p, &g), m), v) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                // p -= lr * m_hat / (sqrt(v_hat) + eps), rearranged
                *p -= lr_t * *m / (v.sqrt() + eps * bias2);
            }
        }
        Ok(())
    }
}
