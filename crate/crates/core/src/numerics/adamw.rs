use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

pub const ADAMW_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.96,
            weight_decay: 1e-5,
            eps: ADAMW_EPS,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |b: f32| b > 0.0 && b < 1.0;
        if !open(self.beta1) || !open(self.beta2) {
            return Err(Error::InvalidParameter(format!(
                "betas must lie in (0,1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lr, weight decay must be >= 0 and eps > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-parameter moments, one buffer per tensor of the owning [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamWState {
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
    pub step_count: u64,
}

impl AdamWState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let first_moment: Vec<Vec<f32>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamWState {
            second_moment: first_moment.clone(),
            first_moment,
            step_count: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            state: AdamWState::zeros_like(params),
        })
    }

    /// One decoupled-weight-decay Adam step using the grads held in `params`.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.state.first_moment.len() != params.len() {
            return Err(Error::Dimension {
                op: "adamw_step",
                left: vec![self.state.first_moment.len()],
                right: vec![params.len()],
            });
        }
        let t = self.state.step_count + 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(t as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(t as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.state.first_moment[i], &mut self.state.second_moment[i]);
            if m.len() != p.data.len() {
                return Err(Error::Dimension {
                    op: "adamw_step",
                    left: vec![m.len()],
                    right: p.shape.clone(),
                });
            }
            let Some(g) = p.grad.as_ref() else { continue };
            update(&mut p.data, g, m, v, &c, bc1 as f32, bc2 as f32);
        }
        self.state.step_count = t;
        Ok(())
    }
}

/// Single-tensor AdamW update for step number `step` (1-based).
pub fn adamw_update(
    param: &mut [f32],
    grad: &[f32],
    first: &mut [f32],
    second: &mut [f32],
    step: u64,
    config: &AdamWConfig,
) -> Result<()> {
    if grad.len() != param.len() || first.len() != param.len() || second.len() != param.len() {
        return Err(Error::Dimension {
            op: "adamw_update",
            left: vec![param.len()],
            right: vec![grad.len(), first.len(), second.len()],
        });
    }
    if step == 0 {
        return Err(Error::Contract("AdamW steps are 1-based".into()));
    }
    let bc1 = 1.0 - (config.beta1 as f64).powi(step as i32);
    let bc2 = 1.0 - (config.beta2 as f64).powi(step as i32);
    update(param, grad, first, second, config, bc1 as f32, bc2 as f32);
    Ok(())
}

fn update(p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], c: &AdamWConfig, bc1: f32, bc2: f32) {
    let decay = c.lr * c.weight_decay;
    for i in 0..p.len() {
        p[i] -= decay * p[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
    }
}
