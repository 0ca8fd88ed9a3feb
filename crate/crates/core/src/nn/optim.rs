use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Momentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Momentum,
            lr: 1e-3,
            momentum: 0.9,
            clip_norm: None,
        }
    }
}

/// Trained parameters and the per-step loss trace of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    /// `(global step, batch loss)` for every step run.
    pub trace: Vec<(u64, f64)>,
}

/// Gradient descent with heavy-ball momentum (`v = mu v + g; p -= lr v`),
/// or Adam when configured.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: ParamStore,
    second: ParamStore,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        Self {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        let norm = grads.l2_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm {norm} at optimizer step {}",
                self.steps
            )));
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let lr = self.config.lr;
        match self.config.kind {
            OptimizerKind::Momentum => {
                let mu = self.config.momentum;
                for (name, p) in params.iter_mut() {
                    let (Some(g), Some(v)) = (grads.get(name), self.first.get_mut(name)) else {
                        continue;
                    };
                    for ((pv, gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                        *vv = mu * *vv + scale * gv;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for (name, p) in params.iter_mut() {
                    let (Some(g), Some(m), Some(v)) =
                        (grads.get(name), self.first.get_mut(name), self.second.get_mut(name))
                    else {
                        continue;
                    };
                    for (((pv, gv), mv), vv) in p
                        .data
                        .iter_mut()
                        .zip(&g.data)
                        .zip(m.data.iter_mut())
                        .zip(v.data.iter_mut())
                    {
                        let g = scale * gv;
                        *mv = b1 * *mv + (1.0 - b1) * g;
                        *vv = b2 * *vv + (1.0 - b2) * g * g;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after optimizer step {}",
                self.steps
            )));
        }
        Ok(())
    }
}
