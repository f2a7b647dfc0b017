//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Step used by the suites; 64-bit arithmetic keeps truncation and rounding
/// error well below the `1e-4` tolerance at this size.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |analytic|)` seen.
    pub max_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_error < tol
    }
}

/// Compares backward-mode gradients of the scalar built by `build` against
/// central differences, for every element of every input.
pub fn check<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::Contract("gradient check needs a scalar output".into()));
        }
        Ok(v.item())
    };

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_error = 0.0;
    let mut worst = (0, 0);
    for i in 0..inputs.len() {
        let mut grads = vec![0.0; inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            grads[j] = (plus - minus) / (2.0 * step);
            let a = analytic[i][j];
            let err = (a - grads[j]).abs() / a.abs().max(1.0);
            if err > max_error || err.is_nan() {
                max_error = if err.is_nan() { f64::INFINITY } else { err };
                worst = (i, j);
            }
        }
        numeric.push(grads);
    }
    Ok(GradCheck {
        max_error,
        worst,
        analytic,
        numeric,
    })
}
