use crate::config::OptimizerKind;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState<F> {
    Sgd,
    Adam {
        step: u64,
        m: Vec<Tensor<F>>,
        v: Vec<Tensor<F>>,
    },
}

impl<F: Real> OptimizerState<F> {
    pub fn new(kind: OptimizerKind, params: &[Tensor<F>]) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                step: 0,
                m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
                v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Sgd => OptimizerKind::Sgd,
            OptimizerState::Adam { .. } => OptimizerKind::Adam,
        }
    }
}

/// Applies one update in place. Adam uses bias-corrected moments.
pub fn optimizer_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut OptimizerState<F>,
    learning_rate: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Internal(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Internal(format!(
                "gradient {i} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    let lr = F::from_f64_lossy(learning_rate);
    match state {
        OptimizerState::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w = *w - lr * *d;
                }
            }
        }
        OptimizerState::Adam { step, m, v } => {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(Error::Internal("optimizer state does not match parameters".into()));
            }
            *step += 1;
            let t = *step as i32;
            let (b1, b2) = (F::from_f64_lossy(ADAM_BETA1), F::from_f64_lossy(ADAM_BETA2));
            let c1 = F::one() / (F::one() - F::from_f64_lossy(ADAM_BETA1.powi(t)));
            let c2 = F::one() / (F::one() - F::from_f64_lossy(ADAM_BETA2.powi(t)));
            let eps = F::from_f64_lossy(ADAM_EPS);
            for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(m.iter_mut().zip(v.iter_mut())) {
                let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                for ((w, &d), (mi, vi)) in iter {
                    *mi = b1 * *mi + (F::one() - b1) * d;
                    *vi = b2 * *vi + (F::one() - b2) * d * d;
                    let mhat = *mi * c1;
                    let vhat = *vi * c2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
