use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// AdamW hyper-parameters. Defaults: β1 0.9, β2 0.999, weight decay 0.02, ε 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
        }
    }
}

/// Moment buffers for the parameters an optimizer was built over, in
/// parameter-table order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn bitwise_eq(&self, other: &OptimizerState) -> bool {
        let bits = |a: &Vec<Vec<f32>>, b: &Vec<Vec<f32>>| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        };
        self.step == other.step
            && self.names == other.names
            && self.config == other.config
            && bits(&self.first_moment, &other.first_moment)
            && bits(&self.second_moment, &other.second_moment)
    }
}

/// One decoupled-weight-decay Adam update of a single buffer. `step` is the
/// 1-based index of this update (used for bias correction).
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut [f32],
    grads: &[f32],
    first: &mut [f32],
    second: &mut [f32],
    step: u64,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || first.len() != n || second.len() != n {
        return Err(Error::dim("adamw_step", &[n], &[grads.len(), first.len(), second.len()]));
    }
    if !(lr >= 0.0) {
        return Err(Error::Range {
            what: "learning rate",
            value: lr,
            range: "[0, inf)".into(),
        });
    }
    if step == 0 {
        return Err(Error::Input("adamw step index is 1-based".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..n {
        let g = grads[i] as f64;
        let m = cfg.beta1 * first[i] as f64 + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * second[i] as f64 + (1.0 - cfg.beta2) * g * g;
        first[i] = m as f32;
        second[i] = v as f32;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        let p = params[i] as f64 * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        params[i] = p as f32;
    }
    Ok(())
}

/// AdamW over the trainable parameters of a [`ParamStore`], reading the
/// gradient slots filled by [`ParamStore::accumulate_grads`].
#[derive(Debug, Clone)]
pub struct AdamW {
    ids: Vec<ParamId>,
    state: OptimizerState,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let ids = store.trainable();
        let state = OptimizerState {
            config,
            step: 0,
            names: ids.iter().map(|&id| store.name(id).to_string()).collect(),
            first_moment: ids.iter().map(|&id| vec![0.0; store.get(id).len()]).collect(),
            second_moment: ids.iter().map(|&id| vec![0.0; store.get(id).len()]).collect(),
        };
        Self { ids, state }
    }

    /// Names of the parameters this optimizer updates.
    pub fn param_names(&self) -> &[String] {
        &self.state.names
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn into_state(self) -> OptimizerState {
        self.state
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient slot are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.state.step += 1;
        let step = self.state.step;
        for (slot, &id) in self.ids.iter().enumerate() {
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            adamw_step(
                t.data_mut(),
                &grad,
                &mut self.state.first_moment[slot],
                &mut self.state.second_moment[slot],
                step,
                &self.state.config,
                lr,
            )?;
        }
        Ok(())
    }
}

impl ParamStore {
    /// Adds the parameter gradients of one backward pass into the slots.
    pub fn accumulate_grads(&mut self, grads: &super::tape::Gradients) {
        for (id, g) in grads.params() {
            let t = self.get_mut(id);
            if t.requires_grad() {
                t.accumulate_grad(g);
            }
        }
    }
}
