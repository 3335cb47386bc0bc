use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Dynamic loss scaling for half-precision training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub scale: f64,
    pub growth_interval: usize,
    pub backoff_factor: f64,
    pub growth_factor: f64,
    pub steps_since_overflow: usize,
    pub min_scale: f64,
    /// Consecutive skipped steps taken while already at `min_scale`.
    pub skips_at_min: usize,
}

impl Default for LossScaler {
    fn default() -> Self {
        LossScaler {
            scale: 65536.0,
            growth_interval: 2000,
            backoff_factor: 0.5,
            growth_factor: 2.0,
            steps_since_overflow: 0,
            min_scale: 1.0,
            skips_at_min: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Skipped,
}

impl LossScaler {
    /// Advances the state machine after a backward pass.
    pub fn update(&mut self, finite: bool) -> StepOutcome {
        if finite {
            self.skips_at_min = 0;
            self.steps_since_overflow += 1;
            if self.steps_since_overflow >= self.growth_interval {
                self.scale *= self.growth_factor;
                self.steps_since_overflow = 0;
            }
            StepOutcome::Applied
        } else {
            if self.scale <= self.min_scale {
                self.skips_at_min += 1;
            }
            self.scale = (self.scale * self.backoff_factor).max(self.min_scale);
            self.steps_since_overflow = 0;
            StepOutcome::Skipped
        }
    }
}

/// Divides every gradient in `grads` by `scale` and reports whether all of
/// them are finite.
pub fn unscale_gradients(grads: &mut GradStore, vars: &[Var], scale: f64) -> Result<bool> {
    let mut finite = true;
    for v in vars {
        if let Some(g) = grads.remove(v.as_tensor()) {
            let g = (g / scale)?;
            if finite {
                let m: f32 = g.abs()?.max_all()?.to_dtype(candle_core::DType::F32)?.to_scalar()?;
                finite = m.is_finite();
            }
            grads.insert(v.as_tensor(), g);
        }
    }
    Ok(finite)
}

/// Gradients of `scale · loss`, unscaled, plus the step decision.
pub struct ScaledGradients {
    pub grads: GradStore,
    pub outcome: StepOutcome,
}

pub fn scaled_backward(loss: &Tensor, scaler: &mut LossScaler, vars: &[Var]) -> Result<ScaledGradients> {
    let scale = scaler.scale;
    let mut grads = (loss * scale)?.backward()?;
    let loss_finite = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?.is_finite();
    let finite = unscale_gradients(&mut grads, vars, scale)? && loss_finite;
    let outcome = scaler.update(finite);
    Ok(ScaledGradients { grads, outcome })
}
