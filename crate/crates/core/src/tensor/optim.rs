use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are keyed by position,
/// so every call must pass parameters in the same order.
#[derive(Clone, Debug)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

/// One parameter slot handed to [`AdamW::step`].
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub value: &'a mut Tensor<T>,
    pub decay: bool,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<ParamSlot<'_, T>>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adamw",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        if let Some((p, _)) = params.iter().zip(grads).find(|(_, g)| g.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let lr = T::of(c.lr);
        let step_size = T::of(c.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for (i, (slot, grad)) in params.into_iter().zip(grads).enumerate() {
            let grad = grad.as_ref().expect("checked above");
            if grad.shape() != slot.value.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: slot.value.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let decay = if slot.decay {
                T::one() - lr * T::of(c.weight_decay)
            } else {
                T::one()
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in slot
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + ob1 * g;
                *vi = b2 * *vi + ob2 * g * g;
                *w *= decay;
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
