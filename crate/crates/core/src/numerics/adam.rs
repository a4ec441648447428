use std::collections::BTreeMap;

use crate::error::{MsdemError, Result};
use crate::numerics::param::round_to_f32;
use crate::numerics::{ParamId, ParamStore, Tensor};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], learning_rate: f64) -> Self {
        AdamState {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// One bias-corrected Adam update. The gradient slot is cleared afterwards.
/// Updated values are rounded to the `f32` grid.
pub fn adam_step(store: &mut ParamStore, id: ParamId, state: &mut AdamState) -> Result<()> {
    let p = store.get_mut(id);
    if p.frozen {
        return Err(MsdemError::Frozen(p.name.clone()));
    }
    let Some(grad) = p.grad.take() else {
        return Err(MsdemError::invalid(format!("parameter `{}` has no gradient", p.name)));
    };
    if state.first_moment.shape() != p.value.shape() {
        return Err(MsdemError::Shape {
            op: "adam_step",
            lhs: p.value.shape().to_vec(),
            rhs: state.first_moment.shape().to_vec(),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (i, (x, g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *x -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    round_to_f32(&mut p.value);
    p.value.check_finite("adam_step")
}

/// A group of parameters sharing one learning rate.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub learning_rate: f64,
    states: BTreeMap<ParamId, AdamState>,
}

impl Adam {
    pub fn new(learning_rate: f64, members: &[ParamId], store: &ParamStore) -> Self {
        let states = members
            .iter()
            .map(|&id| (id, AdamState::new(store.value(id).shape(), learning_rate)))
            .collect();
        Adam { learning_rate, states }
    }

    pub fn members(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.states.keys().copied()
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState> {
        self.states.get(&id)
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        self.learning_rate = learning_rate;
        for s in self.states.values_mut() {
            s.learning_rate = learning_rate;
        }
    }

    pub(crate) fn insert_state(&mut self, id: ParamId, state: AdamState) {
        self.states.insert(id, state);
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (&id, state) in self.states.iter_mut() {
            adam_step(store, id, state)?;
        }
        Ok(())
    }
}
