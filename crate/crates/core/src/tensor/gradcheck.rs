//! Central finite-difference verification of [`Graph::backward`].

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)` seen.
    pub max_rel_error: f64,
    /// (input, flat index, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coordinates: usize,
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences with step `h`.
///
/// `f` receives one `requires_grad` leaf per entry of `inputs`. When
/// `max_coords` is set, at most that many evenly spaced coordinates of each
/// input are perturbed.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, max_coords: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |k: usize, idx: usize, delta: f64| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let mut t = t.clone();
                if j == k {
                    t.data_mut()[idx] += delta;
                }
                g.constant(t)
            })
            .collect();
        let loss = f(&g, &vars)?;
        g.item(loss)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|t| t.data().to_vec());
        let n = t.len();
        let picks: Vec<usize> = match max_coords {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let numeric = (eval(k, idx, h)? - eval(k, idx, -h)?) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |v| v[idx]);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite gradient at input {k}[{idx}]: analytic {a}, numeric {numeric}"
                )));
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((k, idx, a, numeric));
            }
        }
    }
    Ok(report)
}
