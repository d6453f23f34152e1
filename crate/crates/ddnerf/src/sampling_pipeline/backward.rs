//! Hand-derived reverse-mode building blocks for the training step: adjoints
//! of weight normalization, alpha compositing, histogram flooring, the KL
//! term and the truncated-normal CDF parameters.

use crate::math::normal_pdf;
use crate::ray_distribution::IntervalGaussian;

/// Adjoint of y_i = x_i / sum(x). Takes dL/dy, the normalized values and the
/// pre-normalization sum; returns dL/dx.
pub(crate) fn normalize_backward(grad_out: &[f64], normalized: &[f64], sum: f64) -> Vec<f64> {
    let dot: f64 = grad_out.iter().zip(normalized).map(|(g, y)| g * y).sum();
    grad_out.iter().map(|g| (g - dot) / sum).collect()
}

/// Adjoint of w_i = alpha_i * prod_{j<i}(1 - alpha_j). Uses the recurrence
/// A_i = (1 - alpha_{i+1}) A_{i+1} + g_{i+1} alpha_{i+1}, which avoids any
/// division by (1 - alpha): dL/dalpha_i = T_i (g_i - A_i).
pub(crate) fn weights_to_alpha_backward(grad_w: &[f64], alphas: &[f64]) -> Vec<f64> {
    let n = alphas.len();
    let mut grad = vec![0.0; n];
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        grad[i] = grad_w[i] - suffix;
        suffix = (1.0 - alphas[i]) * suffix + grad_w[i] * alphas[i];
    }
    let mut transmittance = 1.0;
    for i in 0..n {
        grad[i] *= transmittance;
        transmittance *= 1.0 - alphas[i];
    }
    grad
}

/// Partial derivatives of G(t) = (Phi(z) - Phi(a)) / (Phi(b) - Phi(a)) with
/// respect to the component's absolute mu and sigma, where a, b, z are the
/// standardized interval bounds and query point. Uniform-fallback components
/// are flat in both parameters (subgradient zero). Points at or beyond the
/// interval bounds see a constant G.
pub(crate) fn truncated_cdf_param_grads(
    g: &IntervalGaussian,
    t_lo: f64,
    t_hi: f64,
    t: f64,
) -> (f64, f64) {
    if g.uniform_fallback || t <= t_lo || t >= t_hi {
        return (0.0, 0.0);
    }
    let s = g.sigma_abs;
    let k = g.trunc_mass;
    let a = (t_lo - g.mu_abs) / s;
    let b = (t_hi - g.mu_abs) / s;
    let z = (t - g.mu_abs) / s;
    let (pa, pb, pz) = (normal_pdf(a), normal_pdf(b), normal_pdf(z));
    let gval = g.cdf_within(t_lo, t_hi, t);
    let d_mu = ((pa - pz) - gval * (pa - pb)) / (s * k);
    let d_sigma = ((pa * a - pz * z) - gval * (pa * a - pb * b)) / (s * k);
    (d_mu, d_sigma)
}

/// dL/d(estimate) for the floored KL term. `estimate` and `target` are the
/// already floored-and-renormalized histograms.
pub(crate) fn kl_grad_wrt_estimate(estimate: &[f64], target: &[f64], kl_forward: bool) -> Vec<f64> {
    if kl_forward {
        // KL(target || estimate): d/de_i = -t_i / e_i
        target.iter().zip(estimate).map(|(t, e)| -t / e).collect()
    } else {
        // KL(estimate || target): d/de_i = ln(e_i / t_i) + 1
        estimate.iter().zip(target).map(|(e, t)| (e / t).ln() + 1.0).collect()
    }
}

/// Adjoint of floor_and_renormalize: y = max(x, eps) / sum(max(x, eps)).
/// Entries at or below the floor receive zero gradient.
pub(crate) fn floor_renorm_backward(grad_out: &[f64], raw: &[f64], eps: f64) -> Vec<f64> {
    let floored: Vec<f64> = raw.iter().map(|&m| m.max(eps)).collect();
    let sum: f64 = floored.iter().sum();
    let normalized: Vec<f64> = floored.iter().map(|f| f / sum).collect();
    let inner = normalize_backward(grad_out, &normalized, sum);
    raw.iter()
        .zip(inner)
        .map(|(&r, g)| if r > eps { g } else { 0.0 })
        .collect()
}
