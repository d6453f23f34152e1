//! Photometric loss, fine-histogram estimation from the coarse mixture, KL
//! divergence, the distribution-estimation (DE) loss with its regularizers,
//! and total loss assembly.

use crate::error::{DdError, Result};
use crate::ray_distribution::{normalize_to_pdf, DepthMixture, DiscreteDepthPdf, RayIntervalSet};
use crate::volume_rendering::Rgb;

/// Loss coefficients. lambda_mu and lambda_sigma default to 0.8/n clamped
/// into [0.01, 0.1]; lambda_de defaults to 0.1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_de: f64,
    pub lambda_mu: f64,
    pub lambda_sigma: f64,
    pub kl_epsilon: f64,
    /// When set, the KL arguments are swapped to KL(h^f || hat-h^f).
    pub kl_forward: bool,
}

impl LossConfig {
    pub fn for_samples(n: usize) -> Self {
        let _ = n;
        let reg = 0.01;
        Self {
            lambda_de: 0.1,
            lambda_mu: reg,
            lambda_sigma: reg,
            kl_epsilon: 1e-8,
            kl_forward: true, // TEMP probe
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_de, self.lambda_mu, self.lambda_sigma, self.kl_epsilon];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DdError::InvalidInput("loss coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_samples(8)
    }
}

/// One training step's loss breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub photometric_coarse: f64,
    pub photometric_fine: f64,
    pub kl_term: f64,
    pub mu_reg: f64,
    pub sigma_reg: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "step,total,photometric_coarse,photometric_fine,kl,mu_reg,sigma_reg";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.total,
            self.photometric_coarse,
            self.photometric_fine,
            self.kl_term,
            self.mu_reg,
            self.sigma_reg
        )
    }
}

/// Mean over rays of ||C - C_fine||^2 + ||C - C_coarse||^2.
pub fn photometric_loss(gt: &[Rgb], pred_coarse: &[Rgb], pred_fine: &[Rgb]) -> Result<f64> {
    if gt.is_empty() {
        return Err(DdError::InvalidInput("empty ray batch".into()));
    }
    if gt.len() != pred_coarse.len() || gt.len() != pred_fine.len() {
        return Err(DdError::DimensionMismatch("photometric batch lengths differ".into()));
    }
    let mut total = 0.0;
    for ((c, pc), pf) in gt.iter().zip(pred_coarse).zip(pred_fine) {
        for ch in 0..3 {
            let dc = c[ch] - pc[ch];
            let df = c[ch] - pf[ch];
            total += dc * dc + df * df;
        }
    }
    Ok(total / gt.len() as f64)
}

/// Integrates the coarse mixture over the fine bins:
/// hat-h^f[i] = F_dd(t'_{i+1}) - F_dd(t'_i), renormalized when the fine
/// partitions cover only part of the support.
pub fn estimate_fine_hist(m: &DepthMixture, fine: &RayIntervalSet) -> Result<DiscreteDepthPdf> {
    let support = m.intervals();
    if fine.t_min() < support.t_min() - 1e-12 || fine.t_max() > support.t_max() + 1e-12 {
        return Err(DdError::InvalidInput(
            "fine partitions must lie within the mixture support".into(),
        ));
    }
    let cdf_vals: Vec<f64> = fine.partitions().iter().map(|&t| m.cdf(t)).collect();
    let masses: Vec<f64> = cdf_vals.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
    normalize_to_pdf(&masses, fine)
}

/// KL(p || q) = sum p_i ln(p_i / q_i), natural log, 0 ln 0 = 0.
/// Requires matched bin structures.
pub fn kl_divergence(p: &DiscreteDepthPdf, q: &DiscreteDepthPdf) -> Result<f64> {
    if p.n() != q.n() || p.intervals() != q.intervals() {
        return Err(DdError::DimensionMismatch("KL needs matching bins".into()));
    }
    Ok(kl_raw(p.mass(), q.mass()))
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
        .sum()
}

/// Floors every bin at eps and renormalizes (avoids log(0) in the KL).
pub fn floor_and_renormalize(mass: &[f64], eps: f64) -> Vec<f64> {
    let floored: Vec<f64> = mass.iter().map(|&m| m.max(eps)).collect();
    let sum: f64 = floored.iter().sum();
    floored.into_iter().map(|m| m / sum).collect()
}

/// The DE loss value together with its components (kl, mu_reg, sigma_reg).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeLossComponents {
    pub kl: f64,
    pub mu_reg: f64,
    pub sigma_reg: f64,
}

/// DE loss: KL(hat-h^f || h^f) plus quadratic penalties on the pre-sigmoid
/// distribution outputs, scaled by 1/n.
pub fn de_loss(
    h_fine: &DiscreteDepthPdf,
    h_fine_est: &DiscreteDepthPdf,
    mu_raw: &[f64],
    sigma_raw: &[f64],
    cfg: &LossConfig,
) -> Result<(f64, DeLossComponents)> {
    if h_fine.n() != h_fine_est.n() {
        return Err(DdError::DimensionMismatch("DE histograms differ in length".into()));
    }
    if mu_raw.len() != sigma_raw.len() {
        return Err(DdError::DimensionMismatch("raw parameter lists differ in length".into()));
    }
    let target = floor_and_renormalize(h_fine.mass(), cfg.kl_epsilon);
    let estimate = floor_and_renormalize(h_fine_est.mass(), cfg.kl_epsilon);
    let kl = if cfg.kl_forward {
        kl_raw(&target, &estimate)
    } else {
        kl_raw(&estimate, &target)
    };
    let n = mu_raw.len().max(1) as f64;
    let mu_reg = cfg.lambda_mu * mu_raw.iter().map(|m| m * m).sum::<f64>() / n;
    let sigma_reg = cfg.lambda_sigma * sigma_raw.iter().map(|s| s * s).sum::<f64>() / n;
    let comps = DeLossComponents { kl, mu_reg, sigma_reg };
    Ok((kl + mu_reg + sigma_reg, comps))
}

/// L = L_nerf + lambda_de * DE_loss.
pub fn total_loss(nerf_loss: f64, de: f64, cfg: &LossConfig) -> f64 {
    nerf_loss + cfg.lambda_de * de
}
