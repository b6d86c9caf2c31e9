use super::mlp::{Gradient, MlpModel};
use crate::error::{ensure, Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, shaped like the model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    first: Option<Gradient>,
    second: Option<Gradient>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn update_tensor(
    params: &mut [f64],
    grad: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    lr: f64,
    c1: f64,
    c2: f64,
) {
    for i in 0..params.len() {
        let g = grad[i];
        first[i] = BETA1 * first[i] + (1.0 - BETA1) * g;
        second[i] = BETA2 * second[i] + (1.0 - BETA2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
}

/// One bias-corrected Adam update applied to `model` in place.
pub fn adam_step(
    model: &mut MlpModel,
    gradient: &Gradient,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    ensure!(
        gradient.conforms_to(model),
        Contract,
        "gradient shape does not match the model"
    );
    if let Some(first) = &state.first {
        ensure!(
            first.conforms_to(model),
            Contract,
            "optimizer state shape does not match the model"
        );
    }
    let first = state
        .first
        .get_or_insert_with(|| Gradient::zeros_like(model));
    let second = state
        .second
        .get_or_insert_with(|| Gradient::zeros_like(model));
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);

    for (k, (w, b)) in model.params_mut().enumerate() {
        update_tensor(
            w.as_mut_slice(),
            gradient.weights[k].as_slice(),
            first.weights[k].as_mut_slice(),
            second.weights[k].as_mut_slice(),
            learning_rate,
            c1,
            c2,
        );
        update_tensor(
            b,
            &gradient.biases[k],
            &mut first.biases[k],
            &mut second.biases[k],
            learning_rate,
            c1,
            c2,
        );
    }
    if !model.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite parameters after Adam step {}",
            state.step
        )));
    }
    Ok(())
}
