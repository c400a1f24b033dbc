//! Parameter traversal and the AdamW optimiser.

use crate::error::{Result, TkgError};
use crate::tensor::Tensor;

/// Anything that owns named trainable tensors.
///
/// `visit` and `visit_mut` must enumerate the same names in the same order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn zero_grad(&self) {
        self.visit(&mut |_, t| t.zero_grad());
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// `(name, gradient)` pairs; missing gradients are reported as zeros.
    fn gradients(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| {
            out.push((
                name.to_string(),
                t.grad().unwrap_or_else(|| vec![0.0; t.numel()]),
            ))
        });
        out
    }
}

impl Parameters for Vec<Tensor> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, t) in self.iter().enumerate() {
            f(&i.to_string(), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(&i.to_string(), t);
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Each step first shrinks a parameter by `1 - lr * weight_decay`, then
/// applies the bias-corrected moment ratio.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if !learning_rate.is_finite() || learning_rate <= 0.0 {
            return Err(TkgError::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if weight_decay.is_nan() || weight_decay < 0.0 {
            return Err(TkgError::InvalidArgument(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter in place from its accumulated gradient.
    ///
    /// Fails without touching anything if some parameter has no gradient buffer.
    pub fn step(&mut self, params: &mut dyn Parameters) -> Result<()> {
        let mut grads = Vec::new();
        let mut missing = None;
        params.visit(&mut |name, t| match t.grad() {
            Some(g) => grads.push(g),
            None => {
                if missing.is_none() {
                    missing = Some(name.to_string());
                }
            }
        });
        if let Some(name) = missing {
            return Err(TkgError::Contract(format!(
                "parameter '{name}' has no gradient"
            )));
        }
        if self.moments.is_empty() {
            self.moments = grads
                .iter()
                .map(|g| (vec![0.0; g.len()], vec![0.0; g.len()]))
                .collect();
        }
        if self.moments.len() != grads.len() {
            return Err(TkgError::Contract(
                "optimiser state was built for a different parameter set".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, wd, b1, b2, eps) = (
            self.learning_rate,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.epsilon,
        );
        let mut k = 0;
        let moments = &mut self.moments;
        let mut shape_error = None;
        params.visit_mut(&mut |name, p| {
            let g = &grads[k];
            let (m, v) = &mut moments[k];
            k += 1;
            if m.len() != g.len() {
                shape_error = Some(name.to_string());
                return;
            }
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] *= 1.0 - lr * wd;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            *p = Tensor::param(data, p.shape());
        });
        match shape_error {
            Some(name) => Err(TkgError::Contract(format!(
                "moment buffers do not match parameter '{name}'"
            ))),
            None => Ok(()),
        }
    }
}
