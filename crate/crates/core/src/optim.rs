//! Named parameter sets and the adaptive-moment optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Parameters keyed by name; iteration order is the sorted name order.
pub type ParamSet<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment accumulators plus step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: ParamSet<T>,
    second: ParamSet<T>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = |p: &ParamSet<T>| {
            p.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect()
        };
        OptimizerState { config, step: 0, first: zeros(params), second: zeros(params) }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.second.get(name)
    }
}

/// One bias-corrected Adam update. Parameters absent from `grads` see a zero gradient.
pub fn adam_step<T: Element>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    for (name, p) in params.iter() {
        let m = state
            .first
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("no optimizer state for {name}")))?;
        if m.shape() != p.shape() {
            return Err(Error::ShapeMismatch(format!("optimizer state for {name}")));
        }
        if let Some(g) = grads.get(name) {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} for parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
    }
    if let Some(extra) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(Error::ShapeMismatch(format!("gradient for unknown parameter {extra}")));
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let lr = T::from_f64_lossy(c.learning_rate);
    let b1 = T::from_f64_lossy(c.beta1);
    let b2 = T::from_f64_lossy(c.beta2);
    let eps = T::from_f64_lossy(c.eps);
    let corr1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
    let corr2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));

    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else {
            // zero gradient: moments decay, update is exactly zero
            for v in state.first.get_mut(name).expect("checked").data_mut() {
                *v = b1 * *v;
            }
            for v in state.second.get_mut(name).expect("checked").data_mut() {
                *v = b2 * *v;
            }
            continue;
        };
        let m = state.first.get_mut(name).expect("checked").data_mut();
        let v = state.second.get_mut(name).expect("checked").data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / corr1;
            let vhat = *vi / corr2;
            *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
