//! Central finite-difference gradient checking.
//!
//! The checked function builds a scalar on a fresh [`Graph`] from a set of
//! input tensors. Analytic gradients come from one backward pass; numeric
//! gradients perturb every input element by `±step` and re-run the forward.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / (|analytic| + 1e-8)` over all elements.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[ti].shape()));
        for k in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[k];
            work[ti].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(abs / (a.abs() + 1e-8));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces a tensor to a scalar with fixed pseudo-random weights, so every
/// output element contributes a distinct, O(1) sensitivity.
pub fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let w = Tensor::from_fn(&shape, |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        0.5 + ((state >> 11) as f64 / (1u64 << 53) as f64)
    });
    let wv = g.constant(w);
    let p = g.mul(v, wv)?;
    g.sum(p)
}
