//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, ..Default::default() }
    }
}

/// Optimizer state: first/second moment per parameter tensor, in the same
/// order the model enumerates its parameters.
pub struct Adam {
    pub hyper: AdamParams,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(hyper: AdamParams, sizes: &[usize]) -> Self {
        Adam {
            hyper,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Rebuild from checkpointed state.
    pub fn from_state(hyper: AdamParams, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Adam { hyper, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update over all parameters. `grads[i]` pairs with `params[i]`.
    /// A non-finite gradient rejects the whole step.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam: {} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.numel() != g.numel() {
                return Err(Error::shape("adam", format!("{}", p.shape()), format!("{}", g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let AdamParams { lr, beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar(v: f64) -> Tensor {
        Tensor::full(Shape::new(1, 1, 1, 1), v)
    }

    fn run_step(adam: &mut Adam, value: &mut Tensor, grad: &Tensor) {
        let mut params = vec![("x".to_string(), value)];
        adam.step(&mut params, &[grad]).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = Adam::new(AdamParams::with_lr(0.05), &[1]);
        let mut x = scalar(1.25);
        for _ in 0..10 {
            run_step(&mut adam, &mut x, &scalar(0.0));
        }
        assert_eq!(x.data()[0], 1.25);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // fresh state, constant gradient: bias-corrected first step is
        // lr * g / (|g| + eps) which is lr to within eps/|g|
        for &g in &[1.0, -3.0, 0.25] {
            let lr = 1e-4;
            let mut adam = Adam::new(AdamParams::with_lr(lr), &[1]);
            let mut x = scalar(0.0);
            run_step(&mut adam, &mut x, &scalar(g));
            let update = -x.data()[0] * g.signum();
            assert!((update.abs() - lr).abs() < 1e-6, "g {g}: step {update}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = x^2, grad 2x
        let mut adam = Adam::new(AdamParams::with_lr(1e-2), &[1]);
        let mut x = scalar(1.0);
        for _ in 0..2000 {
            let g = scalar(2.0 * x.data()[0]);
            run_step(&mut adam, &mut x, &g);
        }
        assert!(x.data()[0].abs() < 1e-3, "final x = {}", x.data()[0]);
    }

    #[test]
    fn zero_learning_rate_keeps_params_exactly() {
        let mut adam = Adam::new(AdamParams::with_lr(0.0), &[1]);
        let mut x = scalar(0.75);
        for g in [1.0, -2.0, 0.3] {
            run_step(&mut adam, &mut x, &scalar(g));
        }
        assert_eq!(x.data()[0], 0.75);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut adam = Adam::new(AdamParams::default(), &[1]);
        let mut x = scalar(1.0);
        let mut params = vec![("x".to_string(), &mut x)];
        let g = scalar(f64::NAN);
        let err = adam.step(&mut params, &[&g]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        // the rejected step must not advance state
        assert_eq!(adam.step_count(), 0);
        drop(params);
        assert_eq!(x.data()[0], 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut adam = Adam::new(AdamParams::default(), &[1]);
        let mut x = scalar(1.0);
        let mut params = vec![("x".to_string(), &mut x)];
        let g = Tensor::zeros(Shape::new(1, 1, 1, 2));
        assert!(adam.step(&mut params, &[&g]).is_err());
    }
}
