//! Parameter updates: plain SGD or Adam-style moments, with an optional
//! cosine learning-rate schedule annealing to zero.

use super::model::{ModelParams, NamedTensors};
use super::LmError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl UpdateRule {
    pub fn adam_default() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `lr_t = base * 0.5 * (1 + cos(pi * t / total))`, reaching 0 at `total`.
    CosineToZero {
        total_steps: u64,
    },
}

impl LrSchedule {
    pub fn rate_at(&self, base_lr: f64, step: u64) -> f64 {
        match self {
            LrSchedule::Constant => base_lr,
            LrSchedule::CosineToZero { total_steps } => {
                if *total_steps == 0 {
                    return base_lr;
                }
                let frac = (step.min(*total_steps) as f64) / (*total_steps as f64);
                base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Optimizer moments and step counter for one model instance.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    rule: UpdateRule,
    schedule: LrSchedule,
    base_lr: f64,
    step: u64,
    m: NamedTensors,
    v: NamedTensors,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, rule: UpdateRule, schedule: LrSchedule, base_lr: f64) -> Self {
        Self {
            rule,
            schedule,
            base_lr,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.rate_at(self.base_lr, self.step)
    }
}

/// One optimizer step: increments the counter and moves `params` against
/// `grads` (which must hold the gradient of the loss being minimized).
pub fn apply_update(
    params: &mut ModelParams,
    grads: &NamedTensors,
    opt: &mut OptimizerState,
) -> Result<(), LmError> {
    for (name, g) in grads {
        let p = params.tensor(name)?;
        if p.shape() != g.shape() {
            return Err(LmError::ShapeMismatch {
                name: name.clone(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(LmError::NonFiniteGradient(name.clone()));
        }
    }
    opt.step += 1;
    let lr = opt.schedule.rate_at(opt.base_lr, opt.step);
    match opt.rule {
        UpdateRule::Sgd => {
            for (name, g) in grads {
                let p = params.tensor_mut(name)?;
                for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * gi;
                }
            }
        }
        UpdateRule::Adam { beta1, beta2, eps } => {
            let t = opt.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for (name, g) in grads {
                let m = opt
                    .m
                    .get_mut(name)
                    .ok_or_else(|| LmError::MissingTensor(name.clone()))?;
                let v = opt
                    .v
                    .get_mut(name)
                    .ok_or_else(|| LmError::MissingTensor(name.clone()))?;
                let p = params.tensor_mut(name)?;
                for i in 0..g.len() {
                    let gi = g.data()[i];
                    m.data_mut()[i] = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                    v.data_mut()[i] = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                    let m_hat = m.data()[i] / bc1;
                    let v_hat = v.data()[i] / bc2;
                    p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::model::T_LOGITS;

    #[test]
    fn zero_gradient_only_advances_step() {
        let mut params = ModelParams::new_bigram(4);
        let snapshot = params.clone();
        let grads = params.zeros_like();
        let mut opt = OptimizerState::new(
            &params,
            UpdateRule::adam_default(),
            LrSchedule::Constant,
            0.1,
        );
        apply_update(&mut params, &grads, &mut opt).unwrap();
        assert_eq!(opt.step(), 1);
        assert_eq!(params, snapshot);
    }

    #[test]
    fn sgd_step_decreases_bigram_cross_entropy() {
        let mut params = ModelParams::new_bigram(5);
        let prompt = vec![0];
        let target = vec![3, 2, 1];
        let before = -params.sequence_log_likelihood(&prompt, &target).unwrap();
        let mut grads = params.zeros_like();
        // Gradient of the loss = -loglik.
        params
            .accumulate_loglik_grad(&prompt, &target, -1.0, &mut grads)
            .unwrap();
        let mut opt = OptimizerState::new(&params, UpdateRule::Sgd, LrSchedule::Constant, 1e-2);
        apply_update(&mut params, &grads, &mut opt).unwrap();
        let after = -params.sequence_log_likelihood(&prompt, &target).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn cosine_reaches_zero_at_final_step() {
        let sched = LrSchedule::CosineToZero { total_steps: 100 };
        assert!((sched.rate_at(1e-2, 100) - 0.0).abs() < 1e-9);
        assert!((sched.rate_at(1e-2, 0) - 1e-2).abs() < 1e-15);
        assert!(sched.rate_at(1e-2, 50) > 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = ModelParams::new_bigram(4);
        let other = ModelParams::new_bigram(5);
        let grads = other.zeros_like();
        let mut opt = OptimizerState::new(&params, UpdateRule::Sgd, LrSchedule::Constant, 0.1);
        assert!(apply_update(&mut params, &grads, &mut opt).is_err());
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut params = ModelParams::new_bigram(4);
        let mut grads = params.zeros_like();
        grads.get_mut(T_LOGITS).unwrap().data_mut()[0] = f64::NAN;
        let mut opt = OptimizerState::new(&params, UpdateRule::Sgd, LrSchedule::Constant, 0.1);
        assert!(matches!(
            apply_update(&mut params, &grads, &mut opt),
            Err(LmError::NonFiniteGradient(_))
        ));
    }
}
