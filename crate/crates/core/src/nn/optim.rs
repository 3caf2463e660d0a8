//! Momentum SGD with decoupled weight decay and a milestone learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{GradientSet, ModelState};

/// Step-wise decaying learning rate: the rate starts at `initial` and is
/// multiplied by `factor` at the start of each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_factor")]
    pub factor: f64,
}

fn default_factor() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule { initial: lr, milestones: Vec::new(), factor: 1.0 }
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial * self.factor.powi(drops as i32)
    }
}

/// One momentum-SGD update:
///
/// ```text
/// v     <- momentum * v + g
/// theta <- theta - lr * v - lr * weight_decay * theta
/// ```
///
/// Weight decay is decoupled from the gradient and applies to weights and
/// biases; BatchNorm gamma/beta join only when `decay_bn_affine` is set, and
/// running statistics are never touched.
pub fn sgd_step(
    model: &mut ModelState,
    grads: &GradientSet,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    decay_bn_affine: bool,
    velocity: &mut GradientSet,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Argument(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Argument(format!("momentum must be in [0, 1), got {momentum}")));
    }
    for (name, theta) in model.params.iter_mut() {
        let g = grads
            .tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("gradient set is missing {name}")))?;
        let v = velocity
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("velocity is missing {name}")))?;
        if g.shape() != theta.shape() {
            return Err(Error::Config(format!(
                "gradient {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                theta.shape()
            )));
        }
        let is_bn_affine = name.ends_with(".gamma") || name.ends_with(".beta");
        let wd = if is_bn_affine && !decay_bn_affine { 0.0 } else { weight_decay };
        let vd = v.data_mut();
        let td = theta.data_mut();
        let gd = g.data();
        for i in 0..td.len() {
            vd[i] = momentum * vd[i] + gd[i];
            td[i] -= lr * vd[i] + lr * wd * td[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{param_name, LayerSpec, ModelState};
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn scalar_model(value: f64) -> ModelState {
        let mut rng = Rng::new(0);
        let mut model = ModelState::init(
            "custom",
            vec![LayerSpec::Dense { inputs: 1, outputs: 1 }],
            (1, 1, 1),
            &mut rng,
        );
        model
            .params
            .insert(param_name(0, "weight"), Tensor::new(vec![1, 1], vec![value]));
        model
            .params
            .insert(param_name(0, "bias"), Tensor::zeros(vec![1]));
        model
    }

    fn grad_of(model: &ModelState, value: f64) -> GradientSet {
        let mut g = GradientSet::zeros_like(model);
        g.tensors
            .get_mut(&param_name(0, "weight"))
            .unwrap()
            .data_mut()[0] = value;
        g
    }

    #[test]
    fn plain_gradient_step_is_exact() {
        let mut model = scalar_model(2.0);
        let g = grad_of(&model, 0.5);
        let mut v = GradientSet::zeros_like(&model);
        sgd_step(&mut model, &g, 0.1, 0.0, 0.0, false, &mut v).unwrap();
        let w = model.params[&param_name(0, "weight")].data()[0];
        assert_eq!(w, 2.0 - 0.1 * 0.5);
    }

    #[test]
    fn zero_gradient_zero_velocity_is_a_fixed_point() {
        let mut model = scalar_model(1.5);
        let g = GradientSet::zeros_like(&model);
        let mut v = GradientSet::zeros_like(&model);
        sgd_step(&mut model, &g, 0.1, 0.9, 0.0, false, &mut v).unwrap();
        assert_eq!(model.params[&param_name(0, "weight")].data()[0], 1.5);
    }

    #[test]
    fn two_momentum_steps_match_hand_unrolled_recurrence() {
        // hand oracle: v1 = g1, w1 = w0 - lr*v1; v2 = 0.9*v1 + g2, w2 = w1 - lr*v2
        let (w0, g1, g2, lr, mu) = (1.0, 0.3, -0.2, 0.05, 0.9);
        let v1 = g1;
        let w1 = w0 - lr * v1;
        let v2 = mu * v1 + g2;
        let w2 = w1 - lr * v2;

        let mut model = scalar_model(w0);
        let mut v = GradientSet::zeros_like(&model);
        let step1 = grad_of(&model, g1);
        let step2 = grad_of(&model, g2);
        sgd_step(&mut model, &step1, lr, mu, 0.0, false, &mut v).unwrap();
        sgd_step(&mut model, &step2, lr, mu, 0.0, false, &mut v).unwrap();
        let w = model.params[&param_name(0, "weight")].data()[0];
        assert!((w - w2).abs() < 1e-15, "engine {w} vs oracle {w2}");
    }

    #[test]
    fn weight_decay_skips_bn_affine_by_default() {
        let mut rng = Rng::new(1);
        let mut model = ModelState::init(
            "custom",
            vec![LayerSpec::BatchNorm { channels: 2 }],
            (2, 2, 2),
            &mut rng,
        );
        let g = GradientSet::zeros_like(&model);
        let mut v = GradientSet::zeros_like(&model);
        sgd_step(&mut model, &g, 0.1, 0.0, 0.5, false, &mut v).unwrap();
        assert_eq!(model.params[&param_name(0, "gamma")].data(), &[1.0, 1.0]);
        let mut m2 = model.clone();
        sgd_step(&mut m2, &g, 0.1, 0.0, 0.5, true, &mut v).unwrap();
        assert!(m2.params[&param_name(0, "gamma")].data()[0] < 1.0);
    }

    #[test]
    fn schedule_drops_at_milestones() {
        let s = LrSchedule { initial: 0.05, milestones: vec![10, 15], factor: 0.1 };
        assert_eq!(s.at_epoch(0), 0.05);
        assert_eq!(s.at_epoch(9), 0.05);
        assert!((s.at_epoch(10) - 0.005).abs() < 1e-15);
        assert!((s.at_epoch(15) - 0.0005).abs() < 1e-15);
        assert!((s.at_epoch(19) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        let mut model = scalar_model(1.0);
        let g = GradientSet::zeros_like(&model);
        let mut v = GradientSet::zeros_like(&model);
        assert!(sgd_step(&mut model, &g, 0.0, 0.0, 0.0, false, &mut v).is_err());
        assert!(sgd_step(&mut model, &g, 0.1, 1.0, 0.0, false, &mut v).is_err());
    }
}
