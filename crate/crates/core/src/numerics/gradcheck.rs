//! Finite-difference gradient checking.

use super::{grad, DiffOp, Rng, Tensor};
use crate::error::Result;

/// Fourth-order central differences with step `step`; relative errors are
/// taken against `max(|analytic|, |numeric|, floor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub step: f32,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 5e-2, floor: 1e-2 }
    }
}

impl GradCheck {
    /// `∂f/∂x_i`, using the step actually representable in f32.
    pub fn derivative(&self, x: &Tensor, i: usize, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<f64> {
        let mut at = |k: f32| -> Result<(f64, f64)> {
            let mut p = x.clone();
            p.data_mut()[i] += k * self.step;
            let xi = p.data()[i] as f64;
            Ok((f(&p)?, xi))
        };
        let (f1, x1) = at(1.0)?;
        let (fm1, xm1) = at(-1.0)?;
        let (f2, _) = at(2.0)?;
        let (fm2, _) = at(-2.0)?;
        let h = (x1 - xm1) / 2.0;
        Ok((8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * h))
    }

    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }

    /// Worst relative error of [`grad`] over every input coordinate, with
    /// the output contracted against a seeded random upstream.
    pub fn check_op(&self, op: DiffOp, inputs: &[Tensor], seed: u64) -> Result<f64> {
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let y = op.forward(&refs)?;
        let u = Rng::new(seed).normal_tensor(y.shape());
        let grads = grad(op, &refs, &u)?;
        let mut worst = 0.0f64;
        for (k, g) in grads.iter().enumerate() {
            for i in 0..inputs[k].len() {
                let numeric = self.derivative(&inputs[k], i, |xk| {
                    let mut args = refs.clone();
                    args[k] = xk;
                    Ok(contract(&op.forward(&args)?, &u))
                })?;
                worst = worst.max(self.relative_error(g.data()[i] as f64, numeric));
            }
        }
        Ok(worst)
    }
}

/// `Σ yᵢ·uᵢ` accumulated in f64.
pub fn contract(y: &Tensor, u: &Tensor) -> f64 {
    y.data().iter().zip(u.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}
