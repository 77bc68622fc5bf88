//! Central finite-difference probes for checking analytic gradients.

use super::DenseNetwork;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// `|a - n| / max(|a|, |n|)`, with exact agreement (including 0 = 0) scored 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// `(f(θ + h) − f(θ − h)) / 2h` for parameter `index`.
pub fn numeric_derivative<F>(net: &DenseNetwork, index: usize, step: f64, mut loss: F) -> f64
where
    F: FnMut(&DenseNetwork) -> f64,
{
    let mut probe = net.clone();
    let base = net.param(index);
    probe.set_param(index, base + step);
    let up = loss(&probe);
    probe.set_param(index, base - step);
    let down = loss(&probe);
    (up - down) / (2.0 * step)
}

/// Compares `analytic` (flat, in parameter order) against central
/// differences at each of `indices`.
pub fn probe<F>(net: &DenseNetwork, analytic: &[f64], indices: &[usize], step: f64, mut loss: F) -> Vec<Probe>
where
    F: FnMut(&DenseNetwork) -> f64,
{
    indices
        .iter()
        .map(|&index| {
            let numeric = numeric_derivative(net, index, step, &mut loss);
            Probe { index, analytic: analytic[index], numeric, rel_error: relative_error(analytic[index], numeric) }
        })
        .collect()
}
