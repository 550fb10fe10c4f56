//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Result of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flattened coordinate (across all checked leaves) with the worst error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Checks the gradient of a scalar graph program over several input tensors.
///
/// `f` receives a fresh graph and one leaf per entry of `point` and must
/// return a scalar node.
pub fn check_gradient<F>(f: F, point: &[Tensor], step: f64) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &leaves);
        g.scalar(out)
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &leaves);
    let analytic = g
        .grad_vector(out, &leaves)
        .expect("checked function must return a scalar");

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = point.to_vec();
    for t in 0..work.len() {
        for k in 0..work[t].len() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + step;
            let plus = eval(&work);
            work[t].data_mut()[k] = orig - step;
            let minus = eval(&work);
            work[t].data_mut()[k] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    }
}

/// Max relative error between the analytic gradient of `f` at `point` and
/// its central differences with the given step.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Graph, Var) -> Var,
{
    check_gradient(|g, v| f(g, v[0]), std::slice::from_ref(point), step).max_rel_error
}
