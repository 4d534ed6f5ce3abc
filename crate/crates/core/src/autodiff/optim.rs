use super::params::{ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, one pair per parameter slot.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let mut moments: Vec<Option<(Tensor<T>, Tensor<T>)>> =
            (0..store.slot_count()).map(|_| None).collect();
        for (id, p) in store.iter() {
            let z = p.value.map(|_| T::zero());
            moments[id.index()] = Some((z.clone(), z));
        }
        AdamState {
            config,
            step: 0,
            moments,
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }
}

/// One in-place Adam update over every live parameter. Gradients are left
/// untouched.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    for (id, p) in store.iter() {
        if p.grad.is_none() {
            return Err(Error::Contract(format!("parameter '{}' has no gradient", p.name)));
        }
        match state.moments(id) {
            Some((m, _)) if m.shape() == p.value.shape() => {}
            _ => return shape_err(format!("optimizer state does not match '{}'", p.name)),
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
    for (id, p) in store.iter_mut() {
        let Some((m, v)) = state.moments.get_mut(id.index()).and_then(Option::as_mut) else {
            continue;
        };
        let g = p.grad.as_ref().expect("checked above").data();
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi * inv_bc1;
            let v_hat = *vi * inv_bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
