use std::collections::BTreeMap;

use crate::{NumericError, ParamStore, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a subset of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    /// Fresh state covering every parameter whose name passes `select`.
    pub fn new(store: &ParamStore, config: AdamConfig, select: impl Fn(&str) -> bool) -> Self {
        let moments = store
            .iter()
            .filter(|(name, _)| select(name))
            .map(|(name, p)| {
                let z = Tensor::zeros(p.value.shape());
                (name.to_string(), (z.clone(), z))
            })
            .collect();
        Self {
            config,
            t: 0,
            moments,
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}

/// One bias-corrected Adam update over the parameters tracked by `state`,
/// then zeroes their gradients.
///
/// A non-finite gradient aborts before any parameter is touched.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for name in state.moments.keys() {
        let param = store.get(name)?;
        if !param.grad.all_finite() {
            return Err(NumericError::NumericFailure(format!(
                "non-finite gradient in `{name}`"
            )));
        }
    }
    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.t as f64;
    let bias1 = 1.0 - libm::pow(beta1, t);
    let bias2 = 1.0 - libm::pow(beta2, t);
    for (name, (m, v)) in state.moments.iter_mut() {
        let param = store.get_mut(name)?;
        let grad = param.grad.data().to_vec();
        let values = param.value.data_mut();
        for (k, g) in grad.iter().enumerate() {
            let mk = &mut m.data_mut()[k];
            *mk = beta1 * *mk + (1.0 - beta1) * g;
            let m_hat = *mk / bias1;
            let vk = &mut v.data_mut()[k];
            *vk = beta2 * *vk + (1.0 - beta2) * g * g;
            let v_hat = *vk / bias2;
            values[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        param.grad.data_mut().fill(0.0);
    }
    Ok(())
}
