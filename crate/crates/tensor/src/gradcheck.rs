//! Central finite-difference check of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error per input.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    /// (input, flat index) of the worst entry.
    pub worst: (usize, usize),
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward gradient of the scalar built by `f` with central
/// differences of step `step` at every entry of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut per_input = vec![0.0; inputs.len()];
    let mut worst = (0, 0);
    let mut max_rel_err = 0.0;
    let mut probe = inputs.to_vec();
    for (ii, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).expect("param has a gradient").data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = probe[ii].data()[j];
            probe[ii].data_mut()[j] = x0 + step;
            let up = eval(&probe)?;
            probe[ii].data_mut()[j] = x0 - step;
            let down = eval(&probe)?;
            probe[ii].data_mut()[j] = x0;
            let e = rel_err(a, (up - down) / (2.0 * step), floor);
            if e > per_input[ii] {
                per_input[ii] = e;
            }
            if e > max_rel_err {
                max_rel_err = e;
                worst = (ii, j);
            }
        }
    }
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
        worst,
    })
}
