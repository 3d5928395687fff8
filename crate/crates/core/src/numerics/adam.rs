use std::collections::BTreeMap;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of updates applied so far.
    pub step: u64,
    /// Per-slot `(first moment, second moment)`.
    pub moments: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Zero moments for every slot of `params`.
    pub fn for_params(params: &ParamStore<S>) -> Self {
        let mut state = Self::default();
        for (name, slot) in params.iter() {
            let z = Tensor::zeros(slot.value.shape());
            state.moments.insert(name.to_string(), (z.clone(), z));
        }
        state
    }
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

/// One bias-corrected Adam update, then clears every gradient.
pub fn adam_step<S: Scalar>(params: &mut ParamStore<S>, state: &mut AdamState<S>, lr: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, s)| s.grad.is_none()) {
        return Err(Error::Consistency(format!("no gradient populated for slot {name:?}")));
    }
    if let Some(name) = state.moments.keys().find(|k| !params.contains(k)) {
        return Err(Error::Consistency(format!("optimizer state for unknown slot {name:?}")));
    }
    let t = state.step + 1;
    let c1 = 1.0 - state.beta1.powi(t as i32);
    let c2 = 1.0 - state.beta2.powi(t as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);

    for (name, slot) in params.iter_mut() {
        let grad = slot.grad.take().expect("checked above");
        let (m, v) = state.moments.entry(name.to_string()).or_insert_with(|| {
            let z = Tensor::zeros(slot.value.shape());
            (z.clone(), z)
        });
        if m.shape() != slot.value.shape() {
            return Err(Error::Consistency(format!(
                "moment shape {:?} does not match slot {name} {:?}",
                m.shape(),
                slot.value.shape()
            )));
        }
        let it = slot
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((p, g), (m, v)) in it {
            let g = g.f64();
            let mn = b1 * m.f64() + (1.0 - b1) * g;
            let vn = b2 * v.f64() + (1.0 - b2) * g * g;
            *m = S::of(mn);
            *v = S::of(vn);
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *p = S::of(p.f64() - update);
        }
    }
    state.step = t;
    Ok(())
}
