use super::{shape_err, KanError};
use serde::{Deserialize, Serialize};

/// Adam moments, one container per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamState {
    /// Zeroed moments for tensors of the given lengths.
    pub fn for_shapes(lengths: &[usize]) -> Self {
        AdamState {
            first_moment: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            ..Default::default()
        }
    }
}

/// One Adam update with decoupled weight decay.
///
/// Each parameter first shrinks by `lr * weight_decay * param`; then the
/// bias-corrected Adam step is applied. Moments are allocated on the first
/// call if the state is empty.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<(), KanError> {
    if params.len() != grads.len() {
        return Err(shape_err(
            format!("{} gradient tensors", params.len()),
            grads.len(),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(shape_err(
                format!("tensor {i} of length {}", p.len()),
                g.len(),
            ));
        }
    }
    if state.first_moment.is_empty() && !params.is_empty() {
        let lengths: Vec<usize> = params.iter().map(|p| p.len()).collect();
        let fresh = AdamState::for_shapes(&lengths);
        state.first_moment = fresh.first_moment;
        state.second_moment = fresh.second_moment;
    }
    if state.first_moment.len() != params.len() || state.second_moment.len() != params.len() {
        return Err(shape_err(
            format!("{} moment tensors", params.len()),
            state.first_moment.len(),
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if state.first_moment[i].len() != p.len() || state.second_moment[i].len() != p.len() {
            return Err(shape_err(
                format!("moment {i} of length {}", p.len()),
                state.first_moment[i].len(),
            ));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let decay = 1.0 - learning_rate * weight_decay;
    for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..param.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            param[j] = param[j] * decay - learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
