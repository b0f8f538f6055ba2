//! Dense tensors and a define-by-run reverse-mode autodiff tape.

mod gemm;
mod graph;
mod tensor;

pub use graph::{conv_out_extent, Graph, Var, PAD};
pub use tensor::Tensor;

use crate::error::Result;

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(tensor slot, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Checks every element of every `requires_grad` tensor in `params`.
///
/// `f` builds a scalar on a fresh graph from the bound parameters; it is run
/// once for the analytic gradient and twice per element for the central
/// difference with step `eps`. The numeric side only ever reads forward
/// values, so it is independent of the backward implementation.
pub fn grad_check<F>(params: &mut [Tensor], eps: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    params.iter_mut().for_each(Tensor::zero_grad);
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out, params)?;
    }

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for slot in 0..params.len() {
        if !params[slot].requires_grad() {
            continue;
        }
        let analytic: Vec<f64> = params[slot]
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params[slot].len()]);
        for i in 0..params[slot].len() {
            let orig = params[slot].data()[i];
            params[slot].data_mut()[i] = orig + eps;
            let up = eval(params)?;
            params[slot].data_mut()[i] = orig - eps;
            let down = eval(params)?;
            params[slot].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (slot, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
