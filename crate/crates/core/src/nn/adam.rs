use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};
use crate::nn::unet::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// What happened to a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient had non-finite entries and nothing was changed.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParameterSet<T>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One Adam update with bias-corrected moments. A non-finite gradient is
    /// an error when `strict`, otherwise the step is skipped without touching
    /// the moments or the step counter.
    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &[Tensor<T>], strict: bool) -> Result<StepOutcome> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!("adam: gradient shape mismatch for {}", p.name)));
            }
        }
        if let Some(bad) = params.params.iter().zip(grads).find(|(_, g)| !g.is_finite()) {
            if strict {
                return Err(Error::Diverged(format!("non-finite gradient for {}", bad.0.name)));
            }
            return Ok(StepOutcome::Skipped);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.epsilon);
        let one = T::one();
        for (i, p) in params.params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::unet::Param;

    fn scalar(w: f64) -> ParameterSet<f64> {
        ParameterSet {
            params: vec![Param {
                name: "w".into(),
                value: Tensor::from_vec([1, 1, 1, 1], vec![w]).unwrap(),
            }],
        }
    }

    fn grad(g: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::from_vec([1, 1, 1, 1], vec![g]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(1.5);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.step(&mut p, &grad(0.0), true).unwrap();
        assert_eq!(p.params[0].value.data()[0], 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [0.3, -7.0, 1e-3] {
            let mut p = scalar(0.0);
            let cfg = AdamConfig { lr: 0.01, ..Default::default() };
            let mut st = AdamState::new(&p, cfg);
            st.step(&mut p, &grad(g), true).unwrap();
            let moved = p.params[0].value.data()[0];
            assert!((moved + 0.01 * g.signum()).abs() < 1e-6, "{g}: {moved}");
        }
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p, AdamConfig { lr: 0.1, ..Default::default() });
        let mut reached = None;
        for i in 0..500 {
            let w = p.params[0].value.data()[0];
            if (w - 3.0).abs() < 0.01 {
                reached = Some(i);
                break;
            }
            st.step(&mut p, &grad(2.0 * (w - 3.0)), true).unwrap();
        }
        assert!(reached.is_some(), "w = {}", p.params[0].value.data()[0]);
    }

    #[test]
    fn non_finite_gradient_policy() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(st.step(&mut p, &grad(f64::NAN), true), Err(Error::Diverged(_))));
        assert_eq!(st.step(&mut p, &grad(f64::INFINITY), false).unwrap(), StepOutcome::Skipped);
        assert_eq!(st.step, 0);
        assert_eq!(p.params[0].value.data()[0], 1.0);
        assert!(st.step(&mut p, &[], false).is_err());
    }
}
