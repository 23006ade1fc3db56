//! Optimizers over named parameter collections. State is indexed by entry
//! position so updates are order-stable and deterministic.

use serde::{Deserialize, Serialize};

use crate::dataio::NetworkParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

pub enum Optimizer {
    Sgd {
        lr: f32,
        momentum: f32,
        weight_decay: f32,
        velocity: Vec<Option<Vec<f32>>>,
    },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
        t: u64,
        m: Vec<Option<Vec<f32>>>,
        v: Vec<Option<Vec<f32>>>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Optimizer::Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn adam(lr: f32, beta1: f32, beta2: f32) -> Self {
        Optimizer::Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. `grads` pairs entry indices with gradient tensors;
    /// entries without a gradient stay untouched.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &[(usize, Tensor<f32>)]) {
        match self {
            Optimizer::Sgd {
                lr,
                momentum,
                weight_decay,
                velocity,
            } => {
                velocity.resize_with(params.entries.len(), || None);
                for (idx, grad) in grads {
                    let entry = &mut params.entries[*idx];
                    let vel = velocity[*idx]
                        .get_or_insert_with(|| vec![0.0; entry.values.len()]);
                    for ((w, &g), v) in entry.values.iter_mut().zip(grad.data()).zip(vel) {
                        let g = g + *weight_decay * *w;
                        *v = *momentum * *v + g;
                        *w -= *lr * *v;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                m.resize_with(params.entries.len(), || None);
                v.resize_with(params.entries.len(), || None);
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for (idx, grad) in grads {
                    let entry = &mut params.entries[*idx];
                    let ms = m[*idx].get_or_insert_with(|| vec![0.0; entry.values.len()]);
                    let vs = v[*idx].get_or_insert_with(|| vec![0.0; entry.values.len()]);
                    for (((w, &g), mi), vi) in entry
                        .values
                        .iter_mut()
                        .zip(grad.data())
                        .zip(ms.iter_mut())
                        .zip(vs.iter_mut())
                    {
                        *mi = *beta1 * *mi + (1.0 - *beta1) * g;
                        *vi = *beta2 * *vi + (1.0 - *beta2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
    }

    pub fn set_lr(&mut self, new_lr: f32) {
        match self {
            Optimizer::Sgd { lr, .. } => *lr = new_lr,
            Optimizer::Adam { lr, .. } => *lr = new_lr,
        }
    }
}
