use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Gradients, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam {
        step: u64,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => {
                let zeros: BTreeMap<String, Tensor> = params
                    .iter()
                    .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                    .collect();
                OptimizerState::Adam {
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Sgd => OptimizerKind::Sgd,
            OptimizerState::Adam { .. } => OptimizerKind::Adam,
        }
    }

    /// Applies one update in place.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64, adam: AdamHyper) {
        match self {
            OptimizerState::Sgd => {
                for (name, p) in params.iter_mut() {
                    let g = &grads[name];
                    for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gv;
                    }
                }
            }
            OptimizerState::Adam { step, m, v } => {
                *step += 1;
                let t = *step as i32;
                let bc1 = 1.0 - adam.beta1.powi(t);
                let bc2 = 1.0 - adam.beta2.powi(t);
                for (name, p) in params.iter_mut() {
                    let g = grads[name].data();
                    let m = m.get_mut(name).expect("adam state per parameter").data_mut();
                    let v = v.get_mut(name).expect("adam state per parameter").data_mut();
                    for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = adam.beta1 * *mv + (1.0 - adam.beta1) * gv;
                        *vv = adam.beta2 * *vv + (1.0 - adam.beta2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + adam.epsilon);
                    }
                }
            }
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales so the global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
}
