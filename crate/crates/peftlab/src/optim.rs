//! SGD and AdamW steps over named parameters.
//!
//! Weight decay is decoupled in both and pulls toward each parameter's
//! `decay_target` (1.0 for propulsion vectors, 0.0 otherwise) so that
//! decaying a rescaling vector does not fight its identity prior.

use std::collections::BTreeMap;

use crate::tensor::Parameter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    /// When false, decay pulls everything toward zero regardless of the
    /// parameter's declared target.
    decay_toward_target: bool,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, decay_toward_target: bool) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            decay_toward_target,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter (AdamW bias correction).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to a trainable parameter. Frozen parameters are
    /// left untouched no matter what gradient is offered.
    pub fn update(&mut self, param: &mut Parameter, grad: &[f64]) {
        if !param.trainable {
            return;
        }
        debug_assert_eq!(param.numel(), grad.len(), "{}", param.name);
        let target = if self.decay_toward_target { param.decay_target } else { 0.0 };
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = self.lr;
                let wd = self.weight_decay;
                for (p, &g) in param.tensor.data_mut().iter_mut().zip(grad) {
                    *p -= lr * (g + wd * (*p - target));
                }
            }
            OptimizerKind::AdamW => {
                let m = self
                    .first_moment
                    .entry(param.name.clone())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                let v = self
                    .second_moment
                    .entry(param.name.clone())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                let t = self.step.max(1) as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (i, (p, &g)) in param.tensor.data_mut().iter_mut().zip(grad).enumerate() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    *p -= self.lr * self.weight_decay * (*p - target);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sgd_formula_evaluation() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0, true);
        let mut p = Parameter::trainable("p", Tensor::vector(vec![1.0]));
        opt.begin_step();
        opt.update(&mut p, &[2.0]);
        assert!((p.tensor.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, 0.0, true);
        let mut p = Parameter::trainable("p", Tensor::vector(vec![3.25]));
        opt.begin_step();
        opt.update(&mut p, &[0.0]);
        assert_eq!(p.tensor.data()[0], 3.25);
    }

    #[test]
    fn adamw_first_step_is_a_bias_corrected_unit_update() {
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.01, 0.0, true);
        let mut p = Parameter::trainable("p", Tensor::vector(vec![1.0, -2.0, 0.5]));
        opt.begin_step();
        opt.update(&mut p, &[1.0, 1.0, 1.0]);
        for (i, init) in [1.0, -2.0, 0.5].iter().enumerate() {
            let delta = init - p.tensor.data()[i];
            assert!((delta - 0.01).abs() < 1e-9, "first step should move by ~lr, got {delta}");
        }
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.5, 0.1, true);
        let mut p = Parameter::frozen("w", Tensor::vector(vec![1.0]));
        opt.begin_step();
        opt.update(&mut p, &[10.0]);
        assert_eq!(p.tensor.data()[0], 1.0);
    }

    #[test]
    fn decay_pulls_toward_declared_target() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.5, true);
        let mut z =
            Parameter::trainable("z", Tensor::vector(vec![1.0])).with_decay_target(1.0);
        opt.begin_step();
        opt.update(&mut z, &[0.0]);
        // At its target, decay contributes nothing.
        assert_eq!(z.tensor.data()[0], 1.0);

        let mut opt0 = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.5, false);
        opt0.begin_step();
        opt0.update(&mut z, &[0.0]);
        // Decaying toward zero shrinks z away from 1.
        assert!(z.tensor.data()[0] < 1.0);
    }

    #[test]
    fn learning_rate_zero_freezes_everything() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::AdamW] {
            let mut opt = Optimizer::new(kind, 0.0, 0.02, true);
            let mut p = Parameter::trainable("p", Tensor::vector(vec![0.7]));
            for _ in 0..5 {
                opt.begin_step();
                opt.update(&mut p, &[1.3]);
            }
            assert_eq!(p.tensor.data()[0], 0.7);
        }
    }
}
