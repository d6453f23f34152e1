//! Probability machinery for depth distributions along a ray: discrete PDFs
//! over interval bins, per-interval truncated Gaussians, the mixture density
//! with its exact CDF, inverse-CDF sampling and histogram smoothing.

use crate::error::{DdError, Result};
use crate::math::{normal_cdf, normal_pdf, normal_quantile};

/// Relative sigma floor applied after the sigmoid (keeps truncation masses
/// away from underflow and densities finite).
pub const SIGMA_REL_MIN: f64 = 1e-3;
/// Below this truncation mass an interval falls back to the uniform density.
pub const TRUNC_MASS_MIN: f64 = 1e-6;
/// Residual tolerance for inverse-CDF refinement.
pub const INVERSE_CDF_TOL: f64 = 1e-10;

/// A ray's partition points t_0 < t_1 < ... < t_n and the derived interval
/// lengths delta_i.
#[derive(Debug, Clone, PartialEq)]
pub struct RayIntervalSet {
    partitions: Vec<f64>,
    deltas: Vec<f64>,
}

impl RayIntervalSet {
    pub fn new(partitions: Vec<f64>) -> Result<Self> {
        if partitions.len() < 2 {
            return Err(DdError::InvalidInput(
                "need at least two partition points".into(),
            ));
        }
        for w in partitions.windows(2) {
            if !w[0].is_finite() || !w[1].is_finite() {
                return Err(DdError::NonFinite("partition point".into()));
            }
            if w[1] <= w[0] {
                return Err(DdError::InvalidInput(format!(
                    "partitions must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let deltas = partitions.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self { partitions, deltas })
    }

    /// n+1 uniform partitions on [near, far].
    pub fn uniform(near: f64, far: f64, n: usize) -> Result<Self> {
        if !(near < far) || n == 0 {
            return Err(DdError::InvalidInput("need near < far and n >= 1".into()));
        }
        let step = (far - near) / n as f64;
        let mut p: Vec<f64> = (0..=n).map(|i| near + step * i as f64).collect();
        p[n] = far;
        Self::new(p)
    }

    pub fn n(&self) -> usize {
        self.deltas.len()
    }

    pub fn partitions(&self) -> &[f64] {
        &self.partitions
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn t_lo(&self, i: usize) -> f64 {
        self.partitions[i]
    }

    pub fn t_hi(&self, i: usize) -> f64 {
        self.partitions[i + 1]
    }

    pub fn delta(&self, i: usize) -> f64 {
        self.deltas[i]
    }

    pub fn t_min(&self) -> f64 {
        self.partitions[0]
    }

    pub fn t_max(&self) -> f64 {
        *self.partitions.last().unwrap()
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        0.5 * (self.partitions[i] + self.partitions[i + 1])
    }

    /// Bin index containing t. Bins are right-open [t_i, t_{i+1}) with the
    /// last bin closed; None outside [t_0, t_n].
    pub fn locate(&self, t: f64) -> Option<usize> {
        if t < self.t_min() || t > self.t_max() {
            return None;
        }
        if t == self.t_max() {
            return Some(self.n() - 1);
        }
        // partition_point: count of partitions <= t, minus one.
        let idx = self.partitions.partition_point(|&p| p <= t);
        Some(idx - 1)
    }
}

/// A piecewise-constant PDF over the interval bins.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDepthPdf {
    intervals: RayIntervalSet,
    mass: Vec<f64>,
    degenerate: bool,
}

/// Normalizes non-negative weights into a discrete PDF. All-zero weights
/// produce the uniform PDF with the degenerate flag set.
pub fn normalize_to_pdf(weights: &[f64], intervals: &RayIntervalSet) -> Result<DiscreteDepthPdf> {
    let n = intervals.n();
    if weights.len() != n {
        return Err(DdError::DimensionMismatch(format!(
            "{} weights for {} intervals",
            weights.len(),
            n
        )));
    }
    let mut sum = 0.0;
    for &w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(DdError::InvalidInput(format!("bad weight {w}")));
        }
        sum += w;
    }
    if sum <= 0.0 {
        return Ok(DiscreteDepthPdf {
            intervals: intervals.clone(),
            mass: vec![1.0 / n as f64; n],
            degenerate: true,
        });
    }
    Ok(DiscreteDepthPdf {
        intervals: intervals.clone(),
        mass: weights.iter().map(|w| w / sum).collect(),
        degenerate: false,
    })
}

impl DiscreteDepthPdf {
    pub fn intervals(&self) -> &RayIntervalSet {
        &self.intervals
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn n(&self) -> usize {
        self.mass.len()
    }

    /// Cumulative masses C_0 = 0 .. C_n = 1.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.mass.len() + 1);
        c.push(0.0);
        let mut acc = 0.0;
        for &m in &self.mass {
            acc += m;
            c.push(acc);
        }
        *c.last_mut().unwrap() = 1.0;
        c
    }

    /// Inverse-CDF sampling of the piecewise-constant density (the baseline
    /// second-stage sampler). Quantiles must be ascending in [0, 1].
    pub fn inverse_cdf_sample(&self, quantiles: &[f64]) -> Result<Vec<f64>> {
        validate_quantiles(quantiles)?;
        let cum = self.cumulative();
        Ok(quantiles
            .iter()
            .map(|&u| {
                let (i, u_rel) = locate_quantile(&cum, &self.mass, u);
                self.intervals.t_lo(i) + u_rel * self.intervals.delta(i)
            })
            .collect())
    }
}

fn validate_quantiles(quantiles: &[f64]) -> Result<()> {
    let mut prev = 0.0;
    for &u in quantiles {
        if !u.is_finite() || !(0.0..=1.0).contains(&u) {
            return Err(DdError::InvalidInput(format!("quantile {u} outside [0,1]")));
        }
        if u < prev {
            return Err(DdError::InvalidInput("quantiles must be ascending".into()));
        }
        prev = u;
    }
    Ok(())
}

/// Finds the bin for quantile u and the within-bin quantile. Zero-mass bins
/// are skipped; boundaries resolve to the earlier non-empty bin.
fn locate_quantile(cum: &[f64], mass: &[f64], u: f64) -> (usize, f64) {
    let n = mass.len();
    // smallest i with cum[i+1] >= u
    let mut i = cum[1..].partition_point(|&c| c < u).min(n - 1);
    // skip forward over empty bins if u sits past them exactly
    while i + 1 < n && mass[i] <= 0.0 && u >= cum[i + 1] {
        i += 1;
    }
    let u_rel = if mass[i] > 0.0 {
        ((u - cum[i]) / mass[i]).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (i, u_rel)
}

/// One interval's Gaussian in relative and absolute coordinates, with its
/// truncation mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalGaussian {
    pub mu_rel: f64,
    pub sigma_rel: f64,
    pub mu_abs: f64,
    pub sigma_abs: f64,
    /// k_i = F_i(t_{i+1}) - F_i(t_i), the in-interval mass of the untruncated
    /// Gaussian.
    pub trunc_mass: f64,
    /// Set when the truncation mass underflowed TRUNC_MASS_MIN; the interval
    /// then uses the uniform density 1/delta.
    pub uniform_fallback: bool,
}

/// Maps relative (mu, sigma) in (0,1) onto absolute interval coordinates and
/// computes the truncation mass.
pub fn build_interval_gaussian(
    mu_rel: f64,
    sigma_rel: f64,
    t_lo: f64,
    t_hi: f64,
) -> Result<IntervalGaussian> {
    if !mu_rel.is_finite() || !sigma_rel.is_finite() || !t_lo.is_finite() || !t_hi.is_finite() {
        return Err(DdError::NonFinite("interval gaussian input".into()));
    }
    if !(0.0 < mu_rel && mu_rel < 1.0) {
        return Err(DdError::InvalidInput(format!("mu_rel {mu_rel} outside (0,1)")));
    }
    if !(sigma_rel > 0.0 && sigma_rel < 1.0) {
        return Err(DdError::InvalidInput(format!(
            "sigma_rel {sigma_rel} outside (0,1)"
        )));
    }
    if !(t_lo < t_hi) {
        return Err(DdError::InvalidInput("need t_lo < t_hi".into()));
    }
    let sigma_rel = sigma_rel.max(SIGMA_REL_MIN);
    let delta = t_hi - t_lo;
    Ok(from_absolute(
        mu_rel,
        sigma_rel,
        t_lo + mu_rel * delta,
        sigma_rel * delta,
        t_lo,
        t_hi,
    ))
}

/// Internal constructor that accepts any positive sigma_abs (used when the
/// uncertainty factor pushes the effective sigma past the interval length).
pub(crate) fn from_absolute(
    mu_rel: f64,
    sigma_rel: f64,
    mu_abs: f64,
    sigma_abs: f64,
    t_lo: f64,
    t_hi: f64,
) -> IntervalGaussian {
    let k = normal_cdf((t_hi - mu_abs) / sigma_abs) - normal_cdf((t_lo - mu_abs) / sigma_abs);
    let uniform_fallback = !(k >= TRUNC_MASS_MIN);
    IntervalGaussian {
        mu_rel,
        sigma_rel,
        mu_abs,
        sigma_abs,
        trunc_mass: k.max(TRUNC_MASS_MIN),
        uniform_fallback,
    }
}

impl IntervalGaussian {
    /// Truncated density f'(t) on [t_lo, t_hi]; zero outside.
    pub fn pdf(&self, t_lo: f64, t_hi: f64, t: f64) -> f64 {
        if t < t_lo || t > t_hi {
            return 0.0;
        }
        if self.uniform_fallback {
            return 1.0 / (t_hi - t_lo);
        }
        let z = (t - self.mu_abs) / self.sigma_abs;
        normal_pdf(z) / (self.sigma_abs * self.trunc_mass)
    }

    /// Normalized within-interval CDF G(t) = (F(t) - F(t_lo)) / k in [0, 1].
    pub fn cdf_within(&self, t_lo: f64, t_hi: f64, t: f64) -> f64 {
        if t <= t_lo {
            return 0.0;
        }
        if t >= t_hi {
            return 1.0;
        }
        if self.uniform_fallback {
            return (t - t_lo) / (t_hi - t_lo);
        }
        let lo = normal_cdf((t_lo - self.mu_abs) / self.sigma_abs);
        let g = (normal_cdf((t - self.mu_abs) / self.sigma_abs) - lo) / self.trunc_mass;
        g.clamp(0.0, 1.0)
    }

    /// Mean of the truncated Gaussian on [t_lo, t_hi] (closed form).
    pub fn truncated_mean(&self, t_lo: f64, t_hi: f64) -> f64 {
        if self.uniform_fallback {
            return 0.5 * (t_lo + t_hi);
        }
        let a = (t_lo - self.mu_abs) / self.sigma_abs;
        let b = (t_hi - self.mu_abs) / self.sigma_abs;
        self.mu_abs + self.sigma_abs * (normal_pdf(a) - normal_pdf(b)) / self.trunc_mass
    }

    pub(crate) fn with_uncertainty(&self, u: f64, t_lo: f64, t_hi: f64) -> IntervalGaussian {
        from_absolute(
            self.mu_rel,
            self.sigma_rel * u,
            self.mu_abs,
            self.sigma_abs * u,
            t_lo,
            t_hi,
        )
    }
}

/// Truncated density evaluation, free-function form.
pub fn truncated_pdf_eval(g: &IntervalGaussian, t_lo: f64, t_hi: f64, t: f64) -> f64 {
    g.pdf(t_lo, t_hi, t)
}

/// The coarse depth mixture f_dd: per-interval truncated Gaussians weighted
/// by the discrete PDF h^c, with a training-time uncertainty factor u that
/// widens every component.
#[derive(Debug, Clone)]
pub struct DepthMixture {
    weights: DiscreteDepthPdf,
    base: Vec<IntervalGaussian>,
    effective: Vec<IntervalGaussian>,
    cumulative: Vec<f64>,
    uncertainty: f64,
}

impl DepthMixture {
    pub fn new(weights: DiscreteDepthPdf, gaussians: Vec<IntervalGaussian>, u: f64) -> Result<Self> {
        if gaussians.len() != weights.n() {
            return Err(DdError::DimensionMismatch(format!(
                "{} gaussians for {} intervals",
                gaussians.len(),
                weights.n()
            )));
        }
        if !(u >= 1.0) {
            return Err(DdError::InvalidInput(format!("uncertainty {u} < 1")));
        }
        let effective = gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| {
                g.with_uncertainty(u, weights.intervals().t_lo(i), weights.intervals().t_hi(i))
            })
            .collect();
        let cumulative = weights.cumulative();
        Ok(Self {
            weights,
            base: gaussians,
            effective,
            cumulative,
            uncertainty: u,
        })
    }

    pub fn intervals(&self) -> &RayIntervalSet {
        self.weights.intervals()
    }

    pub fn weights(&self) -> &DiscreteDepthPdf {
        &self.weights
    }

    pub fn uncertainty(&self) -> f64 {
        self.uncertainty
    }

    /// Components with the uncertainty factor applied.
    pub fn components(&self) -> &[IntervalGaussian] {
        &self.effective
    }

    pub fn base_components(&self) -> &[IntervalGaussian] {
        &self.base
    }

    /// f_dd(t); zero outside the support.
    pub fn pdf(&self, t: f64) -> f64 {
        let iv = self.intervals();
        match iv.locate(t) {
            None => 0.0,
            Some(i) => {
                self.weights.mass()[i] * self.effective[i].pdf(iv.t_lo(i), iv.t_hi(i), t)
            }
        }
    }

    /// F_dd(t), exact closed form; clamps outside the support.
    pub fn cdf(&self, t: f64) -> f64 {
        let iv = self.intervals();
        if t <= iv.t_min() {
            return 0.0;
        }
        if t >= iv.t_max() {
            return 1.0;
        }
        let i = iv.locate(t).unwrap();
        self.cumulative[i]
            + self.weights.mass()[i] * self.effective[i].cdf_within(iv.t_lo(i), iv.t_hi(i), t)
    }

    /// Inverts F_dd at each quantile (ascending, in [0,1]) by locating the
    /// interval through the cumulative weights and inverting the truncated
    /// normal analytically, with Newton/bisection refinement to 1e-10.
    pub fn inverse_cdf_sample(&self, quantiles: &[f64]) -> Result<Vec<f64>> {
        validate_quantiles(quantiles)?;
        let mut out = Vec::with_capacity(quantiles.len());
        let mut prev = f64::NEG_INFINITY;
        for &u in quantiles {
            let (i, u_rel) = locate_quantile(&self.cumulative, self.weights.mass(), u);
            let t = self.invert_in_interval(i, u_rel);
            let t = if t < prev { prev } else { t };
            out.push(t);
            prev = t;
        }
        Ok(out)
    }

    fn invert_in_interval(&self, i: usize, u_rel: f64) -> f64 {
        let iv = self.intervals();
        let (t_lo, t_hi) = (iv.t_lo(i), iv.t_hi(i));
        if u_rel <= 0.0 {
            return t_lo;
        }
        if u_rel >= 1.0 {
            return t_hi;
        }
        let g = &self.effective[i];
        if g.uniform_fallback {
            // exact linear inversion, residual is identically zero
            return t_lo + u_rel * (t_hi - t_lo);
        }
        // analytic seed via the normal quantile
        let phi_lo = normal_cdf((t_lo - g.mu_abs) / g.sigma_abs);
        let target = phi_lo + u_rel * g.trunc_mass;
        let mut t = if target > 0.0 && target < 1.0 {
            (g.mu_abs + g.sigma_abs * normal_quantile(target)).clamp(t_lo, t_hi)
        } else {
            0.5 * (t_lo + t_hi)
        };
        // safeguarded Newton refinement on G(t) - u_rel
        let (mut lo, mut hi) = (t_lo, t_hi);
        for _ in 0..100 {
            let resid = g.cdf_within(t_lo, t_hi, t) - u_rel;
            if resid.abs() <= INVERSE_CDF_TOL {
                break;
            }
            if resid > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let dens = g.pdf(t_lo, t_hi, t);
            let mut next = if dens > 0.0 { t - resid / dens } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if next == t {
                break;
            }
            t = next;
        }
        t
    }

    /// Replaces the uncertainty factor: every base sigma_abs is scaled by u
    /// and the truncation masses are recomputed. Weights are unchanged.
    pub fn apply_uncertainty(&self, u: f64) -> Result<DepthMixture> {
        DepthMixture::new(self.weights.clone(), self.base.clone(), u)
    }
}

/// Convenience free-function forms matching the operation names.
pub fn mixture_pdf_eval(m: &DepthMixture, t: f64) -> f64 {
    m.pdf(t)
}

pub fn mixture_cdf_eval(m: &DepthMixture, t: f64) -> f64 {
    m.cdf(t)
}

pub fn inverse_cdf_sample(m: &DepthMixture, quantiles: &[f64]) -> Result<Vec<f64>> {
    m.inverse_cdf_sample(quantiles)
}

pub fn apply_uncertainty(m: &DepthMixture, u: f64) -> Result<DepthMixture> {
    m.apply_uncertainty(u)
}

/// Histogram smoothing mode for h^c before second-stage sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothingMode {
    /// 1D blur with taps [0.1, 0.8, 0.1], replicated edges (small budgets).
    Blur3,
    /// 2-tap max filter followed by a 2-tap blur.
    Max2Blur2,
}

pub(crate) fn blur3_raw(mass: &[f64]) -> Vec<f64> {
    let n = mass.len();
    (0..n)
        .map(|i| {
            let left = mass[if i == 0 { 0 } else { i - 1 }];
            let right = mass[if i + 1 == n { n - 1 } else { i + 1 }];
            0.1 * left + 0.8 * mass[i] + 0.1 * right
        })
        .collect()
}

/// w''_i = (max(w_{i-1}, w_i) + max(w_i, w_{i+1})) / 2 with replicated edges.
pub(crate) fn max2blur2_raw(mass: &[f64]) -> Vec<f64> {
    let n = mass.len();
    let clamp = |j: isize| -> usize { j.clamp(0, n as isize - 1) as usize };
    (0..n)
        .map(|i| {
            let l = clamp(i as isize - 1);
            let r = clamp(i as isize + 1);
            0.5 * (mass[l].max(mass[i]) + mass[i].max(mass[r]))
        })
        .collect()
}

/// Smooths a discrete PDF and renormalizes; output is a valid PDF.
pub fn smooth_discrete_pdf(pdf: &DiscreteDepthPdf, mode: SmoothingMode) -> Result<DiscreteDepthPdf> {
    if pdf.n() < 2 {
        return Err(DdError::InvalidInput("smoothing needs n >= 2 bins".into()));
    }
    let filtered = match mode {
        SmoothingMode::Blur3 => blur3_raw(pdf.mass()),
        SmoothingMode::Max2Blur2 => max2blur2_raw(pdf.mass()),
    };
    let mut out = normalize_to_pdf(&filtered, pdf.intervals())?;
    out.degenerate = pdf.degenerate;
    Ok(out)
}
