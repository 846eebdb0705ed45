use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// First-order optimizer applied to a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd(Sgd { lr }),
            OptimizerKind::Adam => Self::Adam(Adam::new(lr)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Sgd(_) => OptimizerKind::Sgd,
            Self::Adam(_) => OptimizerKind::Adam,
        }
    }

    /// One descent step: `params -= update(grads)`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(dim_err("optimizer parameter count", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(dim_err(format!("optimizer tensor {i}"), p.len(), g.len()));
            }
        }
        match self {
            Self::Sgd(s) => {
                if s.lr == 0.0 {
                    return Ok(());
                }
                for (p, g) in params.iter_mut().zip(grads) {
                    p.axpy(-s.lr, g);
                }
            }
            Self::Adam(a) => {
                if a.m.is_empty() {
                    a.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
                    a.v = a.m.clone();
                }
                a.t += 1;
                if a.lr == 0.0 {
                    return Ok(());
                }
                let bc1 = 1.0 - a.beta1.powi(a.t as i32);
                let bc2 = 1.0 - a.beta2.powi(a.t as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut a.m[i], &mut a.v[i]);
                    for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = a.beta1 * m[j] + (1.0 - a.beta1) * gj;
                        v[j] = a.beta2 * v[j] + (1.0 - a.beta2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *pj -= a.lr * mhat / (vhat.sqrt() + a.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
