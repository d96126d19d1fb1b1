//! SGD with Nesterov momentum, Adam, and learning-rate schedules.
//!
//! Optimizers act on one parameter group at a time. A `None` gradient means
//! the parameter took no part in the objective: it is left untouched along
//! with its buffers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `η₀ (1 + α p)^(−β)`.
pub fn lr_schedule(p: u64, lr0: f64, alpha: f64, beta: f64) -> f64 {
    lr0 * (1.0 + alpha * p as f64).powf(-beta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Polynomial { lr0: f64, alpha: f64, beta: f64 },
    /// Multiply by `gamma` at each milestone step.
    Milestones { lr0: f64, milestones: Vec<u64>, gamma: f64 },
}

impl LrSchedule {
    pub fn at(&self, p: u64) -> f64 {
        match self {
            Self::Polynomial { lr0, alpha, beta } => lr_schedule(p, *lr0, *alpha, *beta),
            Self::Milestones { lr0, milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| p >= m).count();
                lr0 * gamma.powi(passed as i32)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Polynomial { lr0, alpha, beta } => *lr0 > 0.0 && *alpha >= 0.0 && *beta >= 0.0,
            Self::Milestones { lr0, gamma, .. } => *lr0 > 0.0 && *gamma > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd { momentum: f64, nesterov: bool },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn nesterov() -> Self {
        Self::Sgd {
            momentum: 0.9,
            nesterov: true,
        }
    }

    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step<T: Scalar>(
        &self,
        params: &mut [Tensor<T>],
        grads: &[Option<Tensor<T>>],
        state: &mut OptimState<T>,
        lr: f64,
    ) -> Result<()> {
        match *self {
            Self::Sgd { momentum, nesterov } => sgd_step(params, grads, state, lr, momentum, nesterov),
            Self::Adam { beta1, beta2, eps } => adam_step(params, grads, state, lr, (beta1, beta2), eps),
        }
    }
}

/// Moment buffers for one parameter group.
///
/// `first` holds SGD velocity or Adam's first moment, `second` Adam's second
/// moment. Buffers are allocated as zeros on the first step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn ensure(buffers: &mut Vec<Tensor<T>>, params: &[Tensor<T>]) -> Result<()> {
        if buffers.is_empty() {
            *buffers = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if buffers.len() != params.len() {
            return Err(Error::invalid("optimizer", "state belongs to a different parameter group"));
        }
        for (b, p) in buffers.iter().zip(params) {
            if b.shape() != p.shape() {
                return Err(Error::shape("optimizer state", b.shape(), p.shape()));
            }
        }
        Ok(())
    }
}

fn check_grads<T: Scalar>(params: &[Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(
            "optimizer",
            format!("{} params but {} grads", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
    }
    Ok(())
}

/// One SGD step. With Nesterov: `v ← μv + g`, `θ ← θ − lr (g + μv)`;
/// otherwise `θ ← θ − lr v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut OptimState<T>,
    lr: f64,
    momentum: f64,
    nesterov: bool,
) -> Result<()> {
    check_grads(params, grads)?;
    OptimState::ensure(&mut state.first, params)?;
    let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.first) {
        let Some(g) = g else { continue };
        for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi;
            let update = if nesterov { gi + mu * *vi } else { *vi };
            *x -= lr * update;
        }
    }
    state.step += 1;
    Ok(())
}

/// One bias-corrected Adam step.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut OptimState<T>,
    lr: f64,
    (beta1, beta2): (f64, f64),
    eps: f64,
) -> Result<()> {
    check_grads(params, grads)?;
    OptimState::ensure(&mut state.first, params)?;
    OptimState::ensure(&mut state.second, params)?;
    let t = state.step + 1;
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (one, lr, eps) = (T::one(), T::from_f64(lr), T::from_f64(eps));
    let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        let Some(g) = g else { continue };
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ones(n: usize, v: f64) -> Tensor<f64> {
        Tensor::full(&[n], v)
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 0.1, 1e-4, 0.75), 0.1);
        let expect = 0.1 * 2f64.powf(-0.75);
        assert!((lr_schedule(10_000, 0.1, 1e-4, 0.75) - expect).abs() < 1e-15);
        assert!((expect - 0.05946).abs() < 1e-5);
        assert_eq!(lr_schedule(123_456, 0.3, 0.0, 0.75), 0.3);

        let m = LrSchedule::Milestones {
            lr0: 1e-3,
            milestones: vec![10, 20],
            gamma: 0.1,
        };
        assert_eq!(m.at(9), 1e-3);
        assert!((m.at(10) - 1e-4).abs() < 1e-18);
        assert!((m.at(25) - 1e-5).abs() < 1e-18);
        assert!(LrSchedule::Polynomial { lr0: 0.0, alpha: 0.0, beta: 0.0 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_non_increasing(p in 0u64..1_000_000, dp in 0u64..1000, alpha in 0.0f64..1.0, beta in 0.0f64..2.0) {
            prop_assert!(lr_schedule(p + dp, 0.1, alpha, beta) <= lr_schedule(p, 0.1, alpha, beta));
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = vec![ones(3, 1.0)];
        let mut s = OptimState::new();
        sgd_step(&mut p, &[Some(ones(3, 1.0))], &mut s, 0.1, 0.0, true).unwrap();
        assert!(p[0].data().iter().all(|&x| (x - 0.9).abs() < 1e-15));
    }

    #[test]
    fn nesterov_matches_unrolled_recurrence() {
        let (lr, mu, g) = (0.1, 0.9, 1.0);
        let mut p = vec![ones(1, 0.0)];
        let mut s = OptimState::new();
        for _ in 0..2 {
            sgd_step(&mut p, &[Some(ones(1, g))], &mut s, lr, mu, true).unwrap();
        }
        // v1 = g, step1 = g + μ g; v2 = μ g + g, step2 = g + μ (μ g + g).
        let v1 = g;
        let v2 = mu * v1 + g;
        let expect = -lr * (g + mu * v1) - lr * (g + mu * v2);
        assert!((p[0].data()[0] - expect).abs() < 1e-15);
        assert!((s.first[0].data()[0] - v2).abs() < 1e-15);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn zero_grads() {
        let mut p = vec![ones(4, 0.5)];
        let mut s = OptimState::new();
        sgd_step(&mut p, &[Some(ones(4, 0.0))], &mut s, 0.1, 0.9, true).unwrap();
        assert_eq!(p[0], ones(4, 0.5));

        // Buffers decay by μ under zero gradient.
        s.first[0] = ones(4, 2.0);
        sgd_step(&mut p, &[Some(ones(4, 0.0))], &mut s, 0.1, 0.9, false).unwrap();
        assert!(s.first[0].data().iter().all(|&v| (v - 1.8).abs() < 1e-15));

        let mut p = vec![ones(4, 0.5)];
        let mut s = OptimState::new();
        adam_step(&mut p, &[Some(ones(4, 0.0))], &mut s, 0.1, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(p[0], ones(4, 0.5));
    }

    #[test]
    fn missing_grad_skips_parameter() {
        let mut p = vec![ones(2, 1.0), ones(2, 1.0)];
        let mut s = OptimState::new();
        Optimizer::nesterov()
            .step(&mut p, &[None, Some(ones(2, 1.0))], &mut s, 0.1)
            .unwrap();
        assert_eq!(p[0], ones(2, 1.0));
        assert_ne!(p[1], ones(2, 1.0));
        assert_eq!(s.first[0], Tensor::zeros(&[2]));
    }

    #[test]
    fn non_finite_grad_is_rejected_without_update() {
        let mut p = vec![ones(2, 1.0), ones(2, 1.0)];
        let mut s = OptimState::new();
        let bad = Tensor::new(&[2], vec![0.0, f64::NAN]).unwrap();
        assert!(sgd_step(&mut p, &[Some(ones(2, 1.0)), Some(bad.clone())], &mut s, 0.1, 0.9, true).is_err());
        assert_eq!(p[0], ones(2, 1.0));
        assert!(adam_step(&mut p, &[None, Some(bad)], &mut s, 0.1, (0.9, 0.999), 1e-8).is_err());
        let wrong = Tensor::zeros(&[3]);
        assert!(sgd_step(&mut p, &[None, Some(wrong)], &mut s, 0.1, 0.9, true).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![ones(5, 0.0)];
        let mut s = OptimState::new();
        adam_step(&mut p, &[Some(ones(5, 1.0))], &mut s, 0.01, (0.9, 0.999), 1e-8).unwrap();
        for &x in p[0].data() {
            assert!((x + 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_matches_reference_recurrence() {
        let grads = [0.3, -1.2, 0.7, 2.0, -0.1];
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut p = vec![ones(1, 1.0)];
        let mut s = OptimState::new();
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam_step(&mut p, &[Some(ones(1, g))], &mut s, lr, (b1, b2), eps).unwrap();
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p[0].data()[0] - x).abs() < 1e-14);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut p = vec![Tensor::new(&[3], vec![0.1f32, -0.2, 0.3]).unwrap()];
            let mut s = OptimState::new();
            for i in 0..4 {
                let g = Tensor::new(&[3], vec![0.5f32 * i as f32, -0.1, 0.25]).unwrap();
                Optimizer::adam().step(&mut p, &[Some(g)], &mut s, 0.01).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }
}
