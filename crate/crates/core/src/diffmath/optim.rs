use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_POLY_POWER: f64 = 0.9;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerMode {
    /// Plain SGD with `lr = base_lr * (1 - t/T)^power`.
    SgdPoly,
    Adam,
}

/// Optimizer over a fixed list of parameters.
///
/// Only the listed parameters are ever written; everything else in the
/// store is left bit-identical.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub mode: OptimizerMode,
    pub base_lr: f64,
    pub step_count: usize,
    pub total_steps: usize,
    pub poly_power: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// First and second moments, one pair per parameter; empty for SGD.
    pub adam_moments: Vec<(Tensor, Tensor)>,
    params: Vec<ParamId>,
    /// Round parameters and moments to `f32` after every update, so that a
    /// 32-bit checkpoint captures the training state exactly.
    pub round_to_f32: bool,
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

impl OptimizerState {
    pub fn sgd_poly(params: Vec<ParamId>, base_lr: f64, total_steps: usize, poly_power: f64) -> Result<Self> {
        if base_lr <= 0.0 || !base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be > 0, got {base_lr}")));
        }
        Ok(OptimizerState {
            mode: OptimizerMode::SgdPoly,
            base_lr,
            step_count: 0,
            total_steps,
            poly_power,
            adam_betas: ADAM_BETAS,
            adam_eps: ADAM_EPS,
            adam_moments: Vec::new(),
            params,
            round_to_f32: false,
        })
    }

    pub fn adam(params: Vec<ParamId>, store: &ParamStore, base_lr: f64, total_steps: usize) -> Result<Self> {
        if base_lr <= 0.0 || !base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be > 0, got {base_lr}")));
        }
        let adam_moments = params
            .iter()
            .map(|&id| {
                let s = store.value(id).shape();
                (Tensor::zeros(s), Tensor::zeros(s))
            })
            .collect();
        Ok(OptimizerState {
            mode: OptimizerMode::Adam,
            base_lr,
            step_count: 0,
            total_steps,
            poly_power: DEFAULT_POLY_POWER,
            adam_betas: ADAM_BETAS,
            adam_eps: ADAM_EPS,
            adam_moments,
            params,
            round_to_f32: false,
        })
    }

    pub fn with_f32_rounding(mut self, on: bool) -> Self {
        self.round_to_f32 = on;
        self
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Learning rate the next step will use.
    pub fn learning_rate(&self) -> f64 {
        match self.mode {
            OptimizerMode::SgdPoly => {
                let frac = self.step_count as f64 / self.total_steps.max(1) as f64;
                self.base_lr * (1.0 - frac).max(0.0).powf(self.poly_power)
            }
            OptimizerMode::Adam => self.base_lr,
        }
    }

    /// Apply one update using the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.mode == OptimizerMode::SgdPoly && self.step_count >= self.total_steps {
            return Err(Error::Contract(format!(
                "poly schedule exhausted: step {} of {}",
                self.step_count + 1,
                self.total_steps
            )));
        }
        let lr = self.learning_rate();
        let round = self.round_to_f32;
        match self.mode {
            OptimizerMode::SgdPoly => {
                for &id in &self.params {
                    let g = store.grad(id).clone();
                    for (p, gv) in store.value_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * gv;
                        if round {
                            *p = round32(*p);
                        }
                    }
                }
            }
            OptimizerMode::Adam => {
                let (b1, b2) = self.adam_betas;
                let t = (self.step_count + 1) as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (&id, (m, v)) in self.params.iter().zip(&mut self.adam_moments) {
                    let g = store.grad(id).clone();
                    let p = store.value_mut(id).data_mut();
                    for (((pv, mv), vv), &gv) in p
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        if round {
                            *mv = round32(*mv);
                            *vv = round32(*vv);
                        }
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + self.adam_eps);
                        if round {
                            *pv = round32(*pv);
                        }
                    }
                }
            }
        }
        self.step_count += 1;
        Ok(())
    }
}
