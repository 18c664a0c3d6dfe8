//! Bias-corrected Adam, shared by clients (local optimizer) and the server
//! (FedAdam over pseudo-gradients).

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    step: u64,
}

impl AdamState {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.shapes[i].clone(), self.m[i].clone())
    }

    pub fn second_moment(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.shapes[i].clone(), self.v[i].clone())
    }

    /// One Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(Error::Contract(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.shapes.len()
            )));
        }
        for ((p, g), shape) in params.iter().zip(grads).zip(&self.shapes) {
            if p.shape() != shape.as_slice() || g.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = std::mem::replace(p, Tensor::scalar(0.0)).into_data();
            for (j, (theta, &gj)) in data.iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            *p = Tensor::new(self.shapes[i].clone(), data)?;
        }
        Ok(())
    }
}

/// Plain gradient descent, `θ ← θ − η∇`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract("sgd: params/grads length mismatch".into()));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        let updated = p.zip_map(g, "sgd_step", |t, gi| t - lr * gi)?;
        if !updated.all_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        *p = updated;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0]).unwrap()];
        let before = params.clone();
        let mut st = AdamState::new(AdamConfig::default(), &params);
        st.step(&mut params, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_is_sign_times_lr() {
        let g = Tensor::vector(vec![0.3, -2.0, 1e-3]).unwrap();
        let mut params = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        st.step(&mut params, std::slice::from_ref(&g)).unwrap();
        for (p, gi) in params[0].data().iter().zip(g.data()) {
            let expect = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((p - expect).abs() < 1e-15, "{p} vs {expect}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        assert!(st.step(&mut params, &[Tensor::zeros(&[3])]).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
