use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{cfg_err, dim_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Moment estimates and step counter; stored in checkpoints so training can resume.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: AdamState::default(),
        }
    }

    pub fn with_state(config: AdamConfig, state: AdamState) -> Self {
        Adam { config, state }
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// Applies one update in place. Every parameter in `params` must have a
    /// gradient. Returns the global gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        for name in params.names() {
            let g = grads
                .get(name)
                .ok_or_else(|| cfg_err!("missing gradient for parameter {}", name))?;
            let p = params.get(name)?;
            if g.shape() != p.shape() {
                return Err(dim_err!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    name,
                    g.shape(),
                    p.shape()
                ));
            }
        }
        let norm = global_norm(grads);
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let g = grads[&name].data();
            let m = self
                .state
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .state
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let values = params.values_mut(&name)?;
            for i in 0..g.len() {
                let gi = g[i] * scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before rescaling.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
