use crate::error::{CatError, Result};
use crate::numerics::ParamStore;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, params: &ParamStore) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(CatError::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(CatError::config("momentum must lie in [0, 1)"));
        }
        if weight_decay < 0.0 {
            return Err(CatError::config("weight decay must be non-negative"));
        }
        let velocity = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity,
        })
    }

    pub fn with_defaults(learning_rate: f64, params: &ParamStore) -> Result<Self> {
        Self::new(learning_rate, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY, params)
    }
}

/// `v ← momentum·v + grad + wd·p ; p ← p − lr·v` for every parameter that
/// received a gradient.
pub fn sgd_step(params: &mut ParamStore, state: &mut SgdState) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(CatError::contract(format!(
            "optimizer tracks {} buffers but the model has {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let t = params.get_mut(id);
        let v = &mut state.velocity[id.index()];
        if v.len() != t.numel() {
            return Err(CatError::dim("sgd_step", &[v.len()], t.shape()));
        }
        let Some(grad) = t.grad.take() else {
            continue;
        };
        let data = t.data_mut();
        for j in 0..data.len() {
            v[j] = state.momentum * v[j] + grad[j] + state.weight_decay * data[j];
            data[j] -= state.learning_rate * v[j];
        }
        t.grad = Some(grad);
    }
    Ok(())
}
