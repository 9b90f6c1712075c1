use crate::neural::NetworkWeights;
use crate::{Error, Result};

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per weight entry, plus the shared
/// step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

/// One Adam update over every entry of `weights`, consuming the accumulated
/// gradients (which are then zeroed).
pub fn adam_step(weights: &mut NetworkWeights, state: &mut AdamState, params: &AdamParams) -> Result<()> {
    if state.m.is_empty() {
        state.m = weights
            .entries()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        state.v = state.m.clone();
    }
    if state.m.len() != weights.len() {
        return Err(Error::ShapeMismatch(
            "adam state does not match weight set".into(),
        ));
    }
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - (params.beta1 as f64).powf(t);
    let bias2 = 1.0 - (params.beta2 as f64).powf(t);
    for (idx, tensor) in weights.entries_mut().enumerate() {
        let grad = match tensor.grad() {
            Some(g) => g.to_vec(),
            None => continue, // never touched by backward: no update
        };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        if m.len() != grad.len() {
            return Err(Error::ShapeMismatch("adam moment shape mismatch".into()));
        }
        for k in 0..grad.len() {
            let g = grad[k];
            m[k] = params.beta1 * m[k] + (1.0 - params.beta1) * g;
            v[k] = params.beta2 * v[k] + (1.0 - params.beta2) * g * g;
            let mhat = m[k] as f64 / bias1;
            let vhat = v[k] as f64 / bias2;
            tensor.data_mut()[k] -=
                (params.lr as f64 * mhat / (vhat.sqrt() + params.eps as f64)) as f32;
        }
        tensor.zero_grad();
    }
    Ok(())
}
