//! Central finite-difference check of analytic parameter gradients.

use super::ModelParams;
use crate::numkernel::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, offset)` of the worst coordinate.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

/// Compares `analytic` against `(f(θ+ε) − f(θ−ε)) / 2ε` on at least
/// `min_coords` coordinates, drawn evenly from every tensor.
///
/// The relative error of one coordinate is `|g − ĝ| / max(|g|, |ĝ|, 1e-8)`.
pub fn grad_check<F>(
    loss: F,
    params: &ModelParams,
    analytic: &ModelParams,
    eps: f64,
    min_coords: usize,
    rng: &mut Rng,
) -> GradCheckReport
where
    F: Fn(&ModelParams) -> f64,
{
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let per_tensor = min_coords.div_ceil(lens.len()).max(1);
    let mut coords = Vec::new();
    for (t, &len) in lens.iter().enumerate() {
        let take = per_tensor.min(len);
        // partial Fisher-Yates over offsets without materialising all of them
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < take {
            picked.insert(rng.below(len));
        }
        coords.extend(picked.into_iter().map(|o| (t, o)));
    }

    let grads = analytic.tensors();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: coords.len(),
    };
    for &(t, o) in &coords {
        let original = params.tensors()[t][o];
        probe.tensors_mut()[t][o] = original + eps;
        let up = loss(&probe);
        probe.tensors_mut()[t][o] = original - eps;
        let down = loss(&probe);
        probe.tensors_mut()[t][o] = original;
        let numeric = (up - down) / (2.0 * eps);
        let g = grads[t][o];
        let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst = (t, o);
            report.worst_analytic = g;
            report.worst_numeric = numeric;
        }
    }
    report
}
