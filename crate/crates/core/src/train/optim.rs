//! SGD with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{MavrError, Result};
use crate::numerics::{Scalar, Tensor};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One velocity buffer per parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T: Scalar = f32> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            velocity: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// `g' = g + wd·p; v ← m·v + g'; p ← p − lr·v`. Parameters without a
/// gradient are treated as having gradient zero.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[(ParamId, &Tensor<T>)],
    state: &mut SgdState<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(MavrError::shape("sgd_step", "params", format!("{} buffers for {} parameters", state.velocity.len(), params.len())));
    }
    let mut by_id: Vec<Option<&Tensor<T>>> = vec![None; params.len()];
    for &(id, g) in grads {
        if g.shape() != params.get(id).shape() {
            return Err(MavrError::shape(
                "sgd_step",
                params.name(id).to_string(),
                format!("gradient {:?} vs parameter {:?}", g.shape(), params.get(id).shape()),
            ));
        }
        by_id[id.0] = Some(g);
    }
    let (lr, m, wd) = (T::from_f64(cfg.lr), T::from_f64(cfg.momentum), T::from_f64(cfg.weight_decay));
    for (i, grad) in by_id.into_iter().enumerate() {
        let id = ParamId(i);
        let v = state.velocity[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            let g = grad.map_or(T::ZERO, |g| g.data()[j]) + wd * p[j];
            v[j] = m * v[j] + g;
            p[j] -= lr * v[j];
        }
    }
    Ok(())
}
