//! Student optimizer, teacher averaging, and the epoch schedules for the
//! consistency weight, EMA decay, and pseudo-label threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GcnParams, GradParams};
use crate::numerics::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay to the output layer as well as the first layer.
    pub decay_all_layers: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            decay_all_layers: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: [DenseMatrix; 2],
    v: [DenseMatrix; 2],
}

impl AdamState {
    pub fn new(params: &GcnParams, config: AdamConfig) -> Self {
        let zeros = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            config,
            step: 0,
            m: [zeros(&params.theta0), zeros(&params.theta1)],
            v: [zeros(&params.theta0), zeros(&params.theta1)],
        }
    }

    pub fn first_moments(&self) -> (&DenseMatrix, &DenseMatrix) {
        (&self.m[0], &self.m[1])
    }

    pub fn second_moments(&self) -> (&DenseMatrix, &DenseMatrix) {
        (&self.v[0], &self.v[1])
    }
}

/// One bias-corrected Adam update. Weight decay enters as an L2 term added to
/// the gradient (not decoupled), on `theta0` unless `decay_all_layers` is set.
pub fn adam_step(params: &mut GcnParams, grads: &GradParams, state: &mut AdamState) -> Result<()> {
    if grads.grad_theta0.shape() != params.theta0.shape()
        || grads.grad_theta1.shape() != params.theta1.shape()
    {
        return Err(Error::shape(
            "adam_step",
            format!("{:?}/{:?}", params.theta0.shape(), params.theta1.shape()),
            format!(
                "{:?}/{:?}",
                grads.grad_theta0.shape(),
                grads.grad_theta1.shape()
            ),
        ));
    }
    if !grads.is_finite() {
        let bad = |m: &DenseMatrix| m.values().iter().filter(|v| !v.is_finite()).count();
        return Err(Error::NonFinite(format!(
            "gradients at step {}: {} entries in theta0, {} in theta1",
            state.step + 1,
            bad(&grads.grad_theta0),
            bad(&grads.grad_theta1)
        )));
    }

    state.step += 1;
    let cfg = state.config.clone();
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    let layers = [
        (&mut params.theta0, &grads.grad_theta0, cfg.weight_decay),
        (
            &mut params.theta1,
            &grads.grad_theta1,
            if cfg.decay_all_layers {
                cfg.weight_decay
            } else {
                0.0
            },
        ),
    ];
    for (k, (theta, grad, decay)) in layers.into_iter().enumerate() {
        let m = state.m[k].values_mut();
        let v = state.v[k].values_mut();
        for (((w, &g), m), v) in theta
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(m)
            .zip(v)
        {
            let g = g + decay * *w;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &mut GcnParams, student: &GcnParams, alpha: f64) -> Result<()> {
    if !teacher.same_shape(student) {
        return Err(Error::shape(
            "ema_update",
            format!("{:?}/{:?}", teacher.theta0.shape(), teacher.theta1.shape()),
            format!("{:?}/{:?}", student.theta0.shape(), student.theta1.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "EMA decay must lie in [0, 1], got {alpha}"
        )));
    }
    for (t, s) in [
        (&mut teacher.theta0, &student.theta0),
        (&mut teacher.theta1, &student.theta1),
    ] {
        for (tv, &sv) in t.values_mut().iter_mut().zip(s.values()) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedules {
    pub lambda_max: f64,
    pub alpha_max: f64,
    pub ramp_length: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub self_training_start: usize,
    pub total_epochs: usize,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            lambda_max: 2.0,
            alpha_max: 0.999,
            ramp_length: 200,
            t_start: 0.9,
            t_end: 0.7,
            self_training_start: 200,
            total_epochs: 1000,
        }
    }
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.lambda_max < 0.0 {
            return fail(format!("lambda_max must be >= 0, got {}", self.lambda_max));
        }
        if !(0.0..=1.0).contains(&self.alpha_max) {
            return fail(format!(
                "alpha_max must lie in [0, 1], got {}",
                self.alpha_max
            ));
        }
        if self.t_end > self.t_start {
            return fail(format!(
                "t_end {} exceeds t_start {}",
                self.t_end, self.t_start
            ));
        }
        if self.ramp_length > self.total_epochs {
            return fail(format!(
                "ramp_length {} exceeds total_epochs {}",
                self.ramp_length, self.total_epochs
            ));
        }
        if self.self_training_start > self.total_epochs {
            return fail(format!(
                "self_training_start {} exceeds total_epochs {}",
                self.self_training_start, self.total_epochs
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleValues {
    pub lambda: f64,
    pub alpha: f64,
    pub threshold: f64,
}

/// Sigmoid-shaped ramp for the consistency weight, `1 - 1/(e+1)` capped for
/// the EMA decay, and a threshold held at `t_start` until self-training begins
/// and then lowered linearly to `t_end` at the final epoch.
pub fn eval_schedules(epoch: usize, s: &Schedules) -> ScheduleValues {
    let ramp = if s.ramp_length == 0 {
        1.0
    } else {
        (epoch as f64 / s.ramp_length as f64).min(1.0)
    };
    let lambda = s.lambda_max * (-5.0 * (1.0 - ramp).powi(2)).exp();
    let alpha = (1.0 - 1.0 / (epoch as f64 + 1.0)).min(s.alpha_max);
    let threshold = if epoch <= s.self_training_start || s.total_epochs <= s.self_training_start {
        s.t_start
    } else {
        let span = (s.total_epochs - s.self_training_start) as f64;
        let progress = ((epoch - s.self_training_start) as f64 / span).min(1.0);
        s.t_start + (s.t_end - s.t_start) * progress
    };
    ScheduleValues {
        lambda,
        alpha,
        threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(value: f64) -> GcnParams {
        GcnParams::new(
            DenseMatrix::filled(1, 1, value),
            DenseMatrix::filled(1, 1, value),
        )
        .unwrap()
    }

    fn scalar_grad(g: f64) -> GradParams {
        GradParams {
            grad_theta0: DenseMatrix::filled(1, 1, g),
            grad_theta1: DenseMatrix::filled(1, 1, g),
        }
    }

    #[test]
    fn zero_gradient_without_decay_keeps_params() {
        let mut params = scalar(0.7);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = AdamState::new(&params, cfg);
        for _ in 0..5 {
            adam_step(&mut params, &scalar_grad(0.0), &mut state).unwrap();
        }
        assert_eq!(params, scalar(0.7));
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Reference: m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; step = lr / (1 + eps).
        let mut params = scalar(0.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = AdamState::new(&params, cfg);
        adam_step(&mut params, &scalar_grad(1.0), &mut state).unwrap();
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((params.theta0.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_first_layer_only() {
        let mut params = scalar(1.0);
        let mut state = AdamState::new(&params, AdamConfig::default());
        adam_step(&mut params, &scalar_grad(0.0), &mut state).unwrap();
        // effective gradient 0.0005 on theta0: m_hat = v_hat^0.5 = 0.0005, so a full lr step
        let expected = 1.0 - 0.01 * 0.0005 / (0.0005 + 1e-8);
        assert!((params.theta0.get(0, 0) - expected).abs() < 1e-12);
        assert!(params.theta0.get(0, 0) < 1.0);
        assert_eq!(params.theta1.get(0, 0), 1.0);

        let mut both = scalar(1.0);
        let cfg = AdamConfig {
            decay_all_layers: true,
            ..Default::default()
        };
        let mut state = AdamState::new(&both, cfg);
        adam_step(&mut both, &scalar_grad(0.0), &mut state).unwrap();
        assert!(both.theta1.get(0, 0) < 1.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut params = scalar(1.0);
        let mut state = AdamState::new(&params, AdamConfig::default());
        let err = adam_step(&mut params, &scalar_grad(f64::NAN), &mut state).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn ema_edge_cases() {
        let student = scalar(0.0);
        let mut teacher = scalar(1.0);
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher, scalar(1.0));
        ema_update(&mut teacher, &student, 0.5).unwrap();
        assert_eq!(teacher, scalar(0.5));
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher, student);
        assert!(ema_update(&mut teacher, &student, 1.5).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedules::default();
        let start = eval_schedules(0, &s);
        assert!((start.lambda - 2.0 * (-5f64).exp()).abs() < 1e-15);
        assert!((start.lambda - 0.0135).abs() < 1e-4);
        assert_eq!(start.alpha, 0.0);
        assert_eq!(eval_schedules(s.ramp_length, &s).lambda, 2.0);
        assert_eq!(eval_schedules(s.total_epochs, &s).alpha, 0.999);
        assert_eq!(eval_schedules(s.self_training_start, &s).threshold, 0.9);
        assert!((eval_schedules(s.total_epochs, &s).threshold - 0.7).abs() < 1e-15);
    }

    #[test]
    fn schedules_validate() {
        assert!(Schedules::default().validate().is_ok());
        let bad = Schedules {
            t_end: 0.95,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = Schedules {
            ramp_length: 2000,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
