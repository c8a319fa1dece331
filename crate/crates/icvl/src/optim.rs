//! Plain gradient descent and Adam, shared by the recognizer and the decoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::matrix::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Gd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Stateful optimizer; Adam keeps per-parameter moment slots keyed by name.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: u64,
    slots: BTreeMap<String, (EmbeddingMatrix, EmbeddingMatrix)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step_count: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn gd(lr: f64) -> Self {
        Self::new(OptimizerKind::Gd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    /// Call once per optimization step, before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    /// Apply the update for one named parameter. A zero learning rate leaves
    /// the parameter bitwise untouched.
    pub fn update(&mut self, name: &str, param: &mut EmbeddingMatrix, grad: &EmbeddingMatrix) {
        assert_eq!(param.shape(), grad.shape(), "optimizer shape drift: {name}");
        if self.lr == 0.0 {
            return;
        }
        match self.kind {
            OptimizerKind::Gd => {
                for r in 0..param.rows() {
                    for c in 0..param.dims() {
                        param.set(r, c, param.get(r, c) - self.lr * grad.get(r, c));
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count.max(1) as i32;
                let (m, v) = self.slots.entry(name.to_string()).or_insert_with(|| {
                    (
                        EmbeddingMatrix::zeros(param.rows(), param.dims()),
                        EmbeddingMatrix::zeros(param.rows(), param.dims()),
                    )
                });
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for r in 0..param.rows() {
                    for c in 0..param.dims() {
                        let g = grad.get(r, c);
                        let mval = ADAM_BETA1 * m.get(r, c) + (1.0 - ADAM_BETA1) * g;
                        let vval = ADAM_BETA2 * v.get(r, c) + (1.0 - ADAM_BETA2) * g * g;
                        m.set(r, c, mval);
                        v.set(r, c, vval);
                        let update = self.lr * (mval / bc1) / ((vval / bc2).sqrt() + ADAM_EPS);
                        param.set(r, c, param.get(r, c) - update);
                    }
                }
            }
        }
    }
}
