use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Parameter, Tensor};
use crate::scalar::Scalar;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        Self {
            first_moment: Tensor::zeros(shape.to_vec()),
            second_moment: Tensor::zeros(shape.to_vec()),
            step_count: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of `param` from its accumulated gradient.
///
/// An identically zero gradient still advances the moments and the step
/// count but leaves the value untouched, so parameters that took no part
/// in a loss do not drift on stale momentum.
pub fn adam_step<T: Scalar>(param: &mut Parameter<T>, state: &mut AdamState<T>) -> Result<()> {
    if !param.trainable {
        return Err(Error::Contract(format!(
            "adam_step on frozen parameter `{}`",
            param.name
        )));
    }
    let shape = param.value().shape();
    if param.grad.shape() != shape
        || state.first_moment.shape() != shape
        || state.second_moment.shape() != shape
    {
        return Err(Error::Contract(format!(
            "adam_step shape mismatch for `{}`: value {:?}, grad {:?}, moments {:?}/{:?}",
            param.name,
            shape,
            param.grad.shape(),
            state.first_moment.shape(),
            state.second_moment.shape()
        )));
    }
    let cfg = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bias1 = T::one() - T::lit(cfg.beta1.powi(t));
    let bias2 = T::one() - T::lit(cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));

    let grad = param.grad.data();
    let zero_grad = grad.iter().all(|&g| g == T::zero());
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for ((mi, vi), &g) in m.iter_mut().zip(v.iter_mut()).zip(grad) {
        *mi = b1 * *mi + (T::one() - b1) * g;
        *vi = b2 * *vi + (T::one() - b2) * g * g;
    }
    if zero_grad {
        return Ok(());
    }
    let m = state.first_moment.data();
    let v = state.second_moment.data();
    let value = param.value_mut().data_mut();
    for ((x, &mi), &vi) in value.iter_mut().zip(m).zip(v) {
        let m_hat = mi / bias1;
        let v_hat = vi / bias2;
        *x -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every trainable parameter of a store. Frozen parameters never
/// get a state entry.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    states: BTreeMap<ParamId, AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
        for s in self.states.values_mut() {
            s.config.lr = lr;
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.trainable_ids() {
            let param = store.get_mut(id);
            let config = self.config;
            let state = self
                .states
                .entry(id)
                .or_insert_with(|| AdamState::new(param.value().shape(), config));
            adam_step(param, state)?;
        }
        Ok(())
    }

    pub fn states(&self) -> &BTreeMap<ParamId, AdamState<T>> {
        &self.states
    }

    pub fn insert_state(&mut self, id: ParamId, state: AdamState<T>) {
        self.states.insert(id, state);
    }
}
