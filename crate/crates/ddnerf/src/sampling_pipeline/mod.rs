//! The two-stage hierarchical sampling loop: coarse partitioning (bounded or
//! unbounded), coarse query and mixture construction, guided fine sampling,
//! fine query and rendering, plus the training driver in `train`.

mod backward;
mod train;

pub use train::{forward_backward, Adam, AdamParams, StepEval, TrainState, TrainStateConfig};

use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::error::{DdError, Result};
use crate::radiance_field::{Field, IntervalPrediction, Ray};
use crate::ray_distribution::{
    build_interval_gaussian, normalize_to_pdf, smooth_discrete_pdf, DepthMixture,
    DiscreteDepthPdf, RayIntervalSet, SmoothingMode,
};
use crate::scene_toolkit::CameraModel;
use crate::volume_rendering::{
    composite_color_over, compositing_weights, expected_depth_discrete, expected_depth_mixture,
    opacity_from_density, CompositeResult, Image, Rgb,
};

/// Which second-stage sampler drives training and rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Truncated-Gaussian mixture guidance with the distribution loss.
    Dd,
    /// Piecewise-constant inverse-CDF sampling (the ablation baseline).
    Baseline,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dd => "dd",
            Variant::Baseline => "baseline",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "dd" => Ok(Variant::Dd),
            "baseline" => Ok(Variant::Baseline),
            _ => Err(DdError::InvalidInput(format!(
                "unknown variant '{s}' (expected dd or baseline)"
            ))),
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Variant::Dd => 0,
            Variant::Baseline => 1,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Variant::Dd),
            1 => Ok(Variant::Baseline),
            _ => Err(DdError::Format(format!("unknown variant tag {t}"))),
        }
    }
}

/// Sample-count and partitioning settings for both stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub near: f64,
    pub far: f64,
    pub jitter: bool,
    pub smoothing: SmoothingMode,
    pub unbounded: bool,
    pub seed: u64,
}

/// Histogram smoothing keyed on the coarse sample count: the 3-tap blur for
/// small budgets (up to 16), the max-then-blur filter above that.
pub fn smoothing_for(n_coarse: usize) -> SmoothingMode {
    if n_coarse <= 16 {
        SmoothingMode::Blur3
    } else {
        SmoothingMode::Max2Blur2
    }
}

impl SamplingConfig {
    pub fn new(n_coarse: usize, n_fine: usize, near: f64, far: f64) -> Self {
        Self {
            n_coarse,
            n_fine,
            near,
            far,
            jitter: true,
            smoothing: smoothing_for(n_coarse),
            unbounded: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 || self.n_fine == 0 {
            return Err(DdError::InvalidInput("need n_coarse, n_fine >= 1".into()));
        }
        if !(self.near < self.far) || !self.near.is_finite() || !self.far.is_finite() {
            return Err(DdError::InvalidInput(format!(
                "need finite near < far, got ({}, {})",
                self.near, self.far
            )));
        }
        if self.unbounded && self.near <= 0.0 {
            return Err(DdError::InvalidInput("unbounded sampling needs near > 0".into()));
        }
        Ok(())
    }
}

/// The training-time widening factor for the mixture components: starts at
/// u_start and decays linearly to 1 over `decay_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintySchedule {
    pub u_start: f64,
    pub decay_steps: u64,
}

impl UncertaintySchedule {
    /// Default schedule: u_start = 3, decayed over the first half of training.
    pub fn for_total_steps(total: u64) -> Self {
        Self { u_start: 3.0, decay_steps: (total / 2).max(1) }
    }

    pub fn u_at(&self, step: u64) -> f64 {
        if self.u_start <= 1.0 || step >= self.decay_steps {
            return 1.0;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.u_start + (1.0 - self.u_start) * frac
    }
}

/// Uniform draw in [0, 1) with 53 bits of precision.
pub(crate) fn uniform_01(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Distance along the ray to the exit intersection with the unit sphere
/// centered at the origin, if the segment [near, far] reaches it.
fn unit_sphere_exit(ray: &Ray) -> Option<f64> {
    let o = ray.origin;
    let d = ray.direction;
    let od = o[0] * d[0] + o[1] * d[1] + o[2] * d[2];
    let oo = o[0] * o[0] + o[1] * o[1] + o[2] * o[2];
    let disc = od * od - oo + 1.0;
    if disc <= 0.0 {
        return None;
    }
    let exit = -od + disc.sqrt();
    (exit > ray.near && exit < ray.far).then_some(exit)
}

/// Uniform coarse partitions on [near, far]; with jitter, each interior
/// partition is perturbed uniformly within half the spacing on either side
/// (strict monotonicity is preserved by the half-spacing bound). Unbounded
/// configurations delegate to `unbounded_partition`.
pub fn coarse_partition(
    ray: &Ray,
    cfg: &SamplingConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<RayIntervalSet> {
    cfg.validate()?;
    if cfg.unbounded {
        return unbounded_partition(ray, cfg);
    }
    let n = cfg.n_coarse;
    let spacing = (ray.far - ray.near) / n as f64;
    let mut points = Vec::with_capacity(n + 1);
    points.push(ray.near);
    for i in 1..n {
        let base = ray.near + i as f64 * spacing;
        let p = match (cfg.jitter, rng.as_deref_mut()) {
            (true, Some(r)) => base + (uniform_01(r) - 0.5) * spacing,
            _ => base,
        };
        points.push(p);
    }
    points.push(ray.far);
    RayIntervalSet::new(points)
}

/// Unbounded-scene partitions: half the intervals uniform on the ray segment
/// inside the unit sphere, the rest geometrically spaced from the sphere exit
/// to far (t_k = exit * (far/exit)^(k/m)). Rays that miss the sphere get all
/// partitions geometrically spaced from near.
pub fn unbounded_partition(ray: &Ray, cfg: &SamplingConfig) -> Result<RayIntervalSet> {
    if ray.near <= 0.0 || !(ray.near < ray.far) {
        return Err(DdError::InvalidInput("unbounded sampling needs 0 < near < far".into()));
    }
    let n = cfg.n_coarse;
    let mut points = Vec::with_capacity(n + 1);
    points.push(ray.near);
    match unit_sphere_exit(ray) {
        Some(exit) if n >= 2 => {
            let m_in = n / 2;
            let m_out = n - m_in;
            for i in 1..=m_in {
                points.push(ray.near + (exit - ray.near) * i as f64 / m_in as f64);
            }
            let ratio = ray.far / exit;
            for k in 1..=m_out {
                points.push(exit * ratio.powf(k as f64 / m_out as f64));
            }
        }
        _ => {
            let ratio = ray.far / ray.near;
            for k in 1..=n {
                points.push(ray.near * ratio.powf(k as f64 / n as f64));
            }
        }
    }
    RayIntervalSet::new(points)
}

/// Stratified inverse-CDF quantiles u_k = (k + xi_k)/n; xi_k is 0.5 without
/// jitter, uniform in [0,1) with it. Always strictly ascending.
pub fn stratified_quantiles(n: usize, jitter: bool, mut rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let xi = match (jitter, rng.as_deref_mut()) {
                (true, Some(r)) => uniform_01(r),
                _ => 0.5,
            };
            (k as f64 + xi) / n as f64
        })
        .collect()
}

/// Converts sorted point samples into interval partitions: midpoints between
/// consecutive samples, capped at [near, far], nudged where needed to stay
/// strictly increasing.
pub fn fine_partition_from_samples(samples: &[f64], near: f64, far: f64) -> Result<RayIntervalSet> {
    if samples.is_empty() {
        return Err(DdError::InvalidInput("no fine samples".into()));
    }
    let n = samples.len();
    let mut points = Vec::with_capacity(n + 1);
    points.push(near);
    for w in samples.windows(2) {
        points.push(0.5 * (w[0] + w[1]));
    }
    points.push(far);
    // enforce strict monotonicity: forward pass nudging upward, then a
    // backward pass if the nudges ran into the far cap
    let eps = (far - near) * 1e-9;
    for i in 1..n {
        if points[i] <= points[i - 1] {
            points[i] = points[i - 1] + eps;
        }
    }
    if points[n] <= points[n - 1] {
        for i in (1..n).rev() {
            if points[i] >= points[i + 1] {
                points[i] = points[i + 1] - eps;
            }
        }
    }
    RayIntervalSet::new(points)
}

/// Everything produced by the first stage for one ray.
#[derive(Debug, Clone)]
pub struct CoarsePass {
    pub intervals: RayIntervalSet,
    pub preds: Vec<IntervalPrediction>,
    pub alphas: Vec<f64>,
    pub composite: CompositeResult,
    /// Normalized compositing weights (h^c).
    pub h: DiscreteDepthPdf,
    /// The histogram actually used for second-stage sampling (smoothed in
    /// training mode, identical to `h` otherwise).
    pub h_sampling: DiscreteDepthPdf,
    pub mixture: DepthMixture,
}

/// Runs the coarse stage for one ray: partition, per-interval field query,
/// compositing, and mixture assembly. Smoothing and the uncertainty factor u
/// apply only in training mode.
pub fn run_coarse(
    field: &impl Field,
    ray: &Ray,
    cfg: &SamplingConfig,
    background: Rgb,
    training: bool,
    u: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<CoarsePass> {
    let intervals = coarse_partition(ray, cfg, if training { rng } else { None })?;
    let n = intervals.n();
    let mut preds = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    for i in 0..n {
        let p = field.query(ray, intervals.t_lo(i), intervals.t_hi(i));
        alphas.push(opacity_from_density(p.density, intervals.delta(i))?);
        preds.push(p);
    }
    let weights = compositing_weights(&alphas);
    let colors: Vec<Rgb> = preds.iter().map(|p| p.color).collect();
    let pixel_color = composite_color_over(&weights, &colors, background)?;
    let h = normalize_to_pdf(&weights, &intervals)?;
    let expected_depth = if h.degenerate() { ray.far } else { expected_depth_discrete(&h) };
    let composite = CompositeResult {
        pixel_color,
        accumulated_opacity: weights.iter().sum(),
        weights,
        expected_depth,
    };
    let h_sampling = if training && n >= 2 {
        smooth_discrete_pdf(&h, cfg.smoothing)?
    } else {
        h.clone()
    };
    let gaussians = preds
        .iter()
        .enumerate()
        .map(|(i, p)| build_interval_gaussian(p.mu_rel, p.sigma_rel, intervals.t_lo(i), intervals.t_hi(i)))
        .collect::<Result<Vec<_>>>()?;
    let mixture = DepthMixture::new(h_sampling.clone(), gaussians, if training { u } else { 1.0 })?;
    Ok(CoarsePass { intervals, preds, alphas, composite, h, h_sampling, mixture })
}

/// Everything produced by the second stage for one ray.
#[derive(Debug, Clone)]
pub struct FinePass {
    pub samples: Vec<f64>,
    pub intervals: RayIntervalSet,
    pub preds: Vec<IntervalPrediction>,
    pub alphas: Vec<f64>,
    pub composite: CompositeResult,
    /// Normalized fine compositing weights (h^f).
    pub h: DiscreteDepthPdf,
}

/// Runs the fine stage for one ray: stratified inverse-CDF sampling from the
/// mixture (or the piecewise-constant histogram for the baseline variant),
/// interval construction, fine field query and compositing.
pub fn run_fine(
    field: &impl Field,
    ray: &Ray,
    coarse: &CoarsePass,
    cfg: &SamplingConfig,
    variant: Variant,
    background: Rgb,
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<FinePass> {
    let quantiles = stratified_quantiles(cfg.n_fine, training && cfg.jitter, rng);
    let samples = match variant {
        Variant::Dd => coarse.mixture.inverse_cdf_sample(&quantiles)?,
        Variant::Baseline => coarse.h_sampling.inverse_cdf_sample(&quantiles)?,
    };
    let intervals =
        fine_partition_from_samples(&samples, coarse.intervals.t_min(), coarse.intervals.t_max())?;
    let n = intervals.n();
    let mut preds = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    for i in 0..n {
        // point query at the sample position itself; the surrounding
        // intervals only set the opacity deltas
        let t = samples[i];
        let p = field.query(ray, t, t);
        alphas.push(opacity_from_density(p.density, intervals.delta(i))?);
        preds.push(p);
    }
    let weights = compositing_weights(&alphas);
    let colors: Vec<Rgb> = preds.iter().map(|p| p.color).collect();
    let pixel_color = composite_color_over(&weights, &colors, background)?;
    let h = normalize_to_pdf(&weights, &intervals)?;
    // depth over the actual sample positions: the surrounding intervals are
    // lopsided, so bin midpoints would bias the estimate
    let expected_depth = if h.degenerate() {
        ray.far
    } else {
        let w_sum: f64 = weights.iter().sum();
        weights.iter().zip(&samples).map(|(w, s)| w * s).sum::<f64>() / w_sum
    };
    let composite = CompositeResult {
        pixel_color,
        accumulated_opacity: weights.iter().sum(),
        weights,
        expected_depth,
    };
    Ok(FinePass { samples, intervals, preds, alphas, composite, h })
}

/// Full-frame render output: fine and coarse images, expected depth per
/// stage (ray units, `far` where nothing was hit) and disparity (1/depth).
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub image: Image,
    pub image_coarse: Image,
    pub depth: Vec<f64>,
    pub depth_coarse: Vec<f64>,
    pub disparity: Vec<f64>,
}

/// Renders a camera through the full two-stage pipeline at evaluation
/// settings: u = 1, no smoothing, deterministic mid-bin quantiles.
pub fn render_image(
    coarse_field: &impl Field,
    fine_field: &impl Field,
    camera: &CameraModel,
    cfg: &SamplingConfig,
    variant: Variant,
    background: Rgb,
) -> Result<RenderOutput> {
    camera.validate()?;
    cfg.validate()?;
    let (w, h) = (camera.width, camera.height);
    let mut out = RenderOutput {
        width: w,
        height: h,
        image: Image::new(w, h),
        image_coarse: Image::new(w, h),
        depth: vec![camera.far; w * h],
        depth_coarse: vec![camera.far; w * h],
        disparity: vec![0.0; w * h],
    };
    for py in 0..h {
        for px in 0..w {
            let ray = camera.generate_ray(px as f64, py as f64);
            let coarse = run_coarse(coarse_field, &ray, cfg, background, false, 1.0, None)?;
            let fine = run_fine(fine_field, &ray, &coarse, cfg, variant, background, false, None)?;
            let idx = py * w + px;
            out.image.set(px, py, fine.composite.pixel_color);
            out.image_coarse.set(px, py, coarse.composite.pixel_color);
            out.depth_coarse[idx] = if coarse.h.degenerate() {
                ray.far
            } else {
                match variant {
                    Variant::Dd => expected_depth_mixture(&coarse.mixture),
                    Variant::Baseline => coarse.composite.expected_depth,
                }
            };
            out.depth[idx] = fine.composite.expected_depth;
            out.disparity[idx] = 1.0 / out.depth[idx].max(1e-12);
        }
    }
    Ok(out)
}
