//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::ParamSet;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Moments laid out like the parameter tensors they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: ParamSet<T>>(params: &P, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            cfg,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

pub fn adam_step<T: Real, P: ParamSet<T>>(params: &mut P, grads: &P, state: &mut AdamState<T>) -> Result<()> {
    let gs = grads.tensors();
    for (i, g) in gs.iter().enumerate() {
        if let Some(pos) = g.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient tensor {i} ({}x{}) has {} at flat index {pos} (step {})",
                g.rows(),
                g.cols(),
                g.as_slice()[pos].f64(),
                state.step + 1
            )));
        }
    }
    let mut ps = params.tensors_mut();
    if ps.len() != gs.len() || ps.len() != state.first_moment.len() {
        return Err(Error::Input("optimizer state does not match the parameter layout".into()));
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.cfg;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in ps
        .iter_mut()
        .zip(&gs)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        if !p.same_shape(g) || !p.same_shape(m) {
            return Err(Error::Input("optimizer state does not match the parameter layout".into()));
        }
        for (((pv, &gv), mv), vv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            let g = gv.f64();
            let m_new = beta1 * mv.f64() + (1.0 - beta1) * g;
            let v_new = beta2 * vv.f64() + (1.0 - beta2) * g * g;
            *mv = T::of(m_new);
            *vv = T::of(v_new);
            let upd = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
            *pv = T::of(pv.f64() - upd);
        }
    }
    Ok(())
}
