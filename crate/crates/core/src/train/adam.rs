use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Param, ParamGroup};

/// Learning rate of each parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub extractor: f64,
    pub head: f64,
}

impl LearningRates {
    fn of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Extractor => self.extractor,
            ParamGroup::Head => self.head,
        }
    }
}

/// Moment estimates of the Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Param]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Parameters are left untouched when any
/// gradient entry is non-finite.
pub fn adam_step(params: &mut [Param], grads: &[Vec<f64>], state: &mut AdamState, lr: LearningRates) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "Adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, (g, m)) in params.iter().zip(grads.iter().zip(&state.m)) {
        if g.len() != p.values.len() || m.len() != p.values.len() {
            return Err(Error::Contract(format!(
                "Adam: `{}` has {} values, gradient {} and moments {}",
                p.name,
                p.values.len(),
                g.len(),
                m.len()
            )));
        }
        if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
                index,
                value,
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let rate = lr.of(p.group);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.values[i] -= rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
