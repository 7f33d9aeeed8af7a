//! Central finite-difference gradient checking.
//!
//! The checker rebuilds the graph from scratch for every perturbed input, so
//! it never touches the backward pass it verifies.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error with a small absolute floor so that coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(inputs: &[Tensor], f: &F, grads: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let t = if grads { t.clone().requiring_grad() } else { t.clone() };
            g.leaf(t)
        })
        .collect();
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Checks every coordinate of every input.
pub fn check_all<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    check_coords(inputs, f, h, &coords)
}

/// Checks the listed `(input, element)` coordinates only.
pub fn check_coords<F>(inputs: &[Tensor], f: F, h: f64, coords: &[(usize, usize)]) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(inputs, &f, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        probe[i].data_mut()[j] = orig + h;
        let (g1, _, o1) = evaluate(&probe, &f, false)?;
        probe[i].data_mut()[j] = orig - h;
        let (g2, _, o2) = evaluate(&probe, &f, false)?;
        probe[i].data_mut()[j] = orig;
        let numeric = (g1.value(o1).item() - g2.value(o2).item()) / (2.0 * h);
        let err = relative_error(analytic[i][j], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (i, j);
        }
        report.checked += 1;
    }
    Ok(report)
}
