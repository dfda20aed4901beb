use crate::error::{Error, Result};
use crate::params::{JointParams, TensorGroup, TensorMut, TensorRef};

use super::TrainConfig;

/// A set of named tensors the optimizer can walk in a fixed order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;
}

impl ParamSet for JointParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        JointParams::tensors(self)
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        JointParams::tensors_mut(self)
    }
}

/// Adam moment accumulators, one buffer per tensor in manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<P: ParamSet + ?Sized>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

/// One Adam step with bias correction and decoupled weight decay on weight
/// matrices. Tensors whose group fails `trainable` are left untouched (no
/// update, no decay, no moment change).
pub fn adam_step<P: ParamSet + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState,
    config: &TrainConfig,
    trainable: impl Fn(TensorGroup) -> bool,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    let mut tensors = params.tensors_mut();
    if tensors.len() != grad_tensors.len()
        || tensors.len() != state.first_moment.len()
        || tensors.len() != state.second_moment.len()
    {
        return Err(Error::Internal(format!(
            "optimizer sees {} tensors, {} gradients and {} moment buffers",
            tensors.len(),
            grad_tensors.len(),
            state.first_moment.len()
        )));
    }
    for ((t, g), (m, v)) in tensors
        .iter()
        .zip(&grad_tensors)
        .zip(state.first_moment.iter().zip(&state.second_moment))
    {
        if t.data.len() != g.data.len() || t.data.len() != m.len() || t.data.len() != v.len() {
            return Err(Error::Internal(format!("shape mismatch for tensor {}", t.name)));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    let decay = lr * config.weight_decay;
    for ((tensor, g), (m, v)) in tensors
        .iter_mut()
        .zip(&grad_tensors)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        if !trainable(tensor.group) {
            continue;
        }
        let decays = tensor.kind.decays() && decay != 0.0;
        for (((p, &gi), mi), vi) in tensor.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            if decays {
                *p -= decay * *p;
            }
            *p -= lr * m_hat / (v_hat.sqrt() + config.adam_epsilon);
        }
    }
    Ok(())
}
