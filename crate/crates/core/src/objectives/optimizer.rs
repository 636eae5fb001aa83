use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const LR_DECAY_FACTOR: f64 = 0.8;
pub const LR_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm the gradient is clipped to; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub lr_min: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            lr_min: LR_MIN,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0 && self.clip_norm > 0.0 && self.lr_min >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay, bias correction, and global-norm
/// clipping. Moments are allocated on the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub lr: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_factor: f64,
}

impl OptimizerState {
    pub fn new(lr: f64, config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
        }
        Ok(Self {
            config,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: Vec<&Matrix>) -> Result<StepStats> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in tensor {i}")));
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "tensor {i}: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len()
            || self.m.iter().zip(&grads).any(|(m, g)| m.shape() != g.shape())
        {
            return Err(Error::Contract("parameter layout changed between steps".into()));
        }

        let grad_norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
        let clip_factor = if grad_norm > self.config.clip_norm {
            self.config.clip_norm / grad_norm
        } else {
            1.0
        };
        self.step += 1;
        let OptimizerConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let lr = self.lr;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for (i, (pi, &gi)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                let gi = gi * clip_factor;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                *pi -= lr * update + lr * weight_decay * *pi;
            }
        }
        Ok(StepStats {
            grad_norm,
            clip_factor,
        })
    }
}

/// Multiplies the learning rate by 0.8 (floored at `lr_min`) when the loss
/// went up. Returns the new learning rate. A rate already below the floor,
/// such as a deliberate zero, is never raised.
pub fn lr_decay_check(state: &mut OptimizerState, prev_loss: f64, cur_loss: f64) -> f64 {
    if cur_loss > prev_loss {
        state.lr = (LR_DECAY_FACTOR * state.lr).max(state.config.lr_min).min(state.lr);
    }
    state.lr
}

/// Remembers the previous epoch loss so callers can feed losses one at a time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LrDecayTracker {
    prev_loss: Option<f64>,
}

impl LrDecayTracker {
    pub fn observe(&mut self, state: &mut OptimizerState, loss: f64) -> f64 {
        if let Some(prev) = self.prev_loss {
            lr_decay_check(state, prev, loss);
        }
        self.prev_loss = Some(loss);
        state.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![x]).unwrap()
    }

    fn no_decay() -> OptimizerConfig {
        OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut opt = OptimizerState::new(0.1, no_decay()).unwrap();
        opt.step(vec![&mut p], vec![&Matrix::zeros(1, 3)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_scales_by_norm_ratio() {
        let mut p = Matrix::zeros(1, 2);
        let g = Matrix::from_vec(1, 2, vec![6.0, 8.0]).unwrap();
        let mut opt = OptimizerState::new(0.1, no_decay()).unwrap();
        let stats = opt.step(vec![&mut p], vec![&g]).unwrap();
        assert_eq!(stats.grad_norm, 10.0);
        assert!((stats.clip_factor - 0.1).abs() < 1e-15);
        // First moment holds (1 - beta1) * clipped gradient.
        assert!((opt.m[0].as_slice()[0] - 0.1 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0);
        let mut opt = OptimizerState::new(0.1, no_decay()).unwrap();
        opt.step(vec![&mut p], vec![&scalar(1.0)]).unwrap();
        // m_hat = 1, v_hat = 1, update = 1 / (1 + 1e-8).
        assert!((p.as_slice()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = scalar(2.0);
        let cfg = OptimizerConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(0.1, cfg).unwrap();
        opt.step(vec![&mut p], vec![&scalar(0.0)]).unwrap();
        assert!((p.as_slice()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let mut p = scalar(0.0);
        let mut opt = OptimizerState::new(0.1, no_decay()).unwrap();
        let err = opt.step(vec![&mut p], vec![&Matrix::filled(1, 1, f64::NAN)]);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn decay_rule() {
        let mut opt = OptimizerState::new(1e-4, OptimizerConfig::default()).unwrap();
        assert_eq!(lr_decay_check(&mut opt, 1.0, 0.9), 1e-4);
        assert!((lr_decay_check(&mut opt, 0.9, 1.0) - 8e-5).abs() < 1e-18);
        let mut floor = OptimizerState::new(1e-6, OptimizerConfig::default()).unwrap();
        assert_eq!(lr_decay_check(&mut floor, 0.0, 1.0), 1e-6);
        let mut zero = OptimizerState::new(0.0, OptimizerConfig::default()).unwrap();
        assert_eq!(lr_decay_check(&mut zero, 0.0, 1.0), 0.0);
    }

    #[test]
    fn tracker_skips_first_observation() {
        let mut opt = OptimizerState::new(1e-4, OptimizerConfig::default()).unwrap();
        let mut tracker = LrDecayTracker::default();
        let trace: Vec<f64> = [1.0, 0.9, 1.1, 1.2]
            .iter()
            .map(|&l| tracker.observe(&mut opt, l))
            .collect();
        for (got, want) in trace.iter().zip([1e-4, 1e-4, 8e-5, 6.4e-5]) {
            assert!((got - want).abs() <= 1e-12 * want);
        }
    }
}
