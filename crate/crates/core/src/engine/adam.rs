use serde::{Deserialize, Serialize};

use super::net::{DenseNet, Gradients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::new(0.001, 0.9, 0.999)
    }
}

/// Adam moments over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn for_net(config: AdamConfig, net: &DenseNet) -> Self {
        Self::new(config, net.param_count())
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        self.step += 1;
        let (lr, c1, c2) = self.corrections();
        self.apply(0, params.iter_mut(), grads.iter().copied(), lr, c1, c2);
        Ok(())
    }

    /// Same update applied directly to a network's weights and biases.
    pub fn step_net(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        if net.param_count() != self.m.len() || grads.weights.len() != net.layers().len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: net.param_count(),
            });
        }
        for (l, (gw, gb)) in net.layers().iter().zip(grads.weights.iter().zip(&grads.biases)) {
            if l.weights.dim() != gw.dim() || l.biases.len() != gb.len() {
                return Err(Error::DimensionMismatch {
                    expected: l.param_count(),
                    got: gw.len() + gb.len(),
                });
            }
        }
        self.step += 1;
        let (lr, c1, c2) = self.corrections();
        let mut offset = 0;
        for (layer, (gw, gb)) in net.touch().iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
            let nw = layer.weights.len();
            self.apply(offset, layer.weights.iter_mut(), gw.iter().copied(), lr, c1, c2);
            offset += nw;
            let nb = layer.biases.len();
            self.apply(offset, layer.biases.iter_mut(), gb.iter().copied(), lr, c1, c2);
            offset += nb;
        }
        Ok(())
    }

    fn corrections(&self) -> (f64, f64, f64) {
        let t = self.step as i32;
        (
            self.config.learning_rate,
            1.0 - self.config.beta1.powi(t),
            1.0 - self.config.beta2.powi(t),
        )
    }

    fn apply<'a>(
        &mut self,
        offset: usize,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = f64>,
        lr: f64,
        c1: f64,
        c2: f64,
    ) {
        let AdamConfig { beta1, beta2, epsilon, .. } = self.config;
        let m = &mut self.m[offset..];
        let v = &mut self.v[offset..];
        for (((p, g), m), v) in params.zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}
