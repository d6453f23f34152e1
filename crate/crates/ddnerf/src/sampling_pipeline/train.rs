//! Training driver: Adam with exponential learning-rate decay, the batched
//! train step with hand-derived reverse-mode gradients through compositing,
//! smoothing and the mixture CDF, and bit-exact checkpointing.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DdError, Result};
use crate::losses::{
    de_loss, estimate_fine_hist, floor_and_renormalize, LossConfig, LossReport,
};
use crate::math::{sigmoid, sigmoid_deriv_from_output, softplus, softplus_deriv};
use crate::radiance_field::{
    Activation, EncodingConfig, FieldNetwork, Ray, HEAD_DENSITY, HEAD_MU, HEAD_RGB, HEAD_SIGMA,
    MU_REL_EPS,
};
use crate::ray_distribution::{
    build_interval_gaussian, normalize_to_pdf, smooth_discrete_pdf, DepthMixture,
    DiscreteDepthPdf, RayIntervalSet, SmoothingMode, SIGMA_REL_MIN,
};
use crate::scene_toolkit::CameraModel;
use crate::volume_rendering::{composite_color_over, compositing_weights, opacity_from_density, Rgb};

use super::backward::{
    floor_renorm_backward, kl_grad_wrt_estimate, normalize_backward, truncated_cdf_param_grads,
    weights_to_alpha_backward,
};
use super::{
    coarse_partition, fine_partition_from_samples, render_image, stratified_quantiles,
    RenderOutput, SamplingConfig, UncertaintySchedule, Variant,
};

/// Adam moment-decay constants and numerical floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment buffers for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { params: AdamParams::default(), m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One bias-corrected update; `t` is the 1-based step index.
    pub fn update(&mut self, t: u64, lr: f64, weights: &mut [f64], grads: &[f64]) {
        let AdamParams { beta1, beta2, epsilon } = self.params;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for i in 0..weights.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            weights[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

/// Static configuration of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStateConfig {
    pub sampling: SamplingConfig,
    pub loss: LossConfig,
    pub schedule: UncertaintySchedule,
    pub variant: Variant,
    pub total_steps: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub background: Rgb,
}

impl TrainStateConfig {
    pub fn new(sampling: SamplingConfig, variant: Variant, total_steps: u64, background: Rgb) -> Self {
        Self {
            loss: LossConfig::for_samples(sampling.n_coarse),
            schedule: UncertaintySchedule::for_total_steps(total_steps),
            sampling,
            variant,
            total_steps,
            lr_start: 5e-4,
            lr_end: 5e-5,
            background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        self.loss.validate()?;
        if self.total_steps == 0 {
            return Err(DdError::InvalidInput("total_steps must be >= 1".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(DdError::InvalidInput("learning rates must be positive".into()));
        }
        if !(self.schedule.u_start >= 1.0) {
            return Err(DdError::InvalidInput("u_start must be >= 1".into()));
        }
        Ok(())
    }

    /// Exponential decay from lr_start at step 0 to lr_end at total_steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        self.lr_start * (self.lr_end / self.lr_start).powf(frac)
    }
}

/// Complete training state: both networks, optimizer moments, step counter
/// and RNG. Checkpoints round-trip bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub coarse: FieldNetwork,
    pub fine: FieldNetwork,
    pub cfg: TrainStateConfig,
    pub step: u64,
    pub rng: ChaCha8Rng,
    adam_coarse: Adam,
    adam_fine: Adam,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.coarse == other.coarse
            && self.fine == other.fine
            && self.cfg == other.cfg
            && self.step == other.step
            && self.rng == other.rng
            && self.adam_coarse == other.adam_coarse
            && self.adam_fine == other.adam_fine
    }
}

/// One evaluated batch: the loss breakdown, flat parameter gradients for both
/// networks, and the fine sample positions actually used.
pub struct StepEval {
    pub report: LossReport,
    pub grads_coarse: Vec<f64>,
    pub grads_fine: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
}

impl TrainState {
    /// Fresh state; both networks are initialized from the sampling seed
    /// (coarse first), so identical configs give identical states.
    pub fn new(
        cfg: TrainStateConfig,
        hidden: &[usize],
        num_frequencies: usize,
        activation: Activation,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampling.seed);
        let enc = EncodingConfig { num_frequencies, include_input: true };
        // both variants share the same architecture: the distribution heads
        // exist everywhere and simply receive zero gradient in baseline mode
        let coarse = FieldNetwork::new(enc, hidden, true, activation, &mut rng)?;
        let fine = FieldNetwork::new(enc, hidden, false, activation, &mut rng)?;
        let adam_coarse = Adam::new(coarse.mlp.param_count());
        let adam_fine = Adam::new(fine.mlp.param_count());
        Ok(Self { coarse, fine, cfg, step: 0, rng, adam_coarse, adam_fine })
    }

    pub fn uncertainty(&self) -> f64 {
        self.cfg.schedule.u_at(self.step)
    }

    /// One optimizer step over a ray batch. Aborts with a diagnostic on any
    /// non-finite loss or gradient.
    pub fn train_step(&mut self, rays: &[Ray], gt: &[Rgb]) -> Result<LossReport> {
        if rays.is_empty() || rays.len() != gt.len() {
            return Err(DdError::InvalidInput(format!(
                "bad batch: {} rays, {} colors",
                rays.len(),
                gt.len()
            )));
        }
        let u = self.uncertainty();
        // all random draws happen up front, in ray order
        let mut parts = Vec::with_capacity(rays.len());
        for ray in rays {
            parts.push(coarse_partition(ray, &self.cfg.sampling, Some(&mut self.rng))?);
        }
        let quantiles: Vec<Vec<f64>> = rays
            .iter()
            .map(|_| {
                stratified_quantiles(
                    self.cfg.sampling.n_fine,
                    self.cfg.sampling.jitter,
                    Some(&mut self.rng),
                )
            })
            .collect();
        let eval = forward_backward(
            &self.coarse, &self.fine, &self.cfg, u, rays, gt, &parts, &quantiles, None,
        )?;
        let r = &eval.report;
        let finite = r.total.is_finite()
            && eval.grads_coarse.iter().all(|g| g.is_finite())
            && eval.grads_fine.iter().all(|g| g.is_finite());
        if !finite {
            return Err(DdError::TrainingAborted(format!(
                "non-finite loss or gradient at step {}: total={} coarse={} fine={} kl={}",
                self.step, r.total, r.photometric_coarse, r.photometric_fine, r.kl_term
            )));
        }
        let lr = self.cfg.lr_at(self.step);
        let t = self.step + 1;
        apply_update(&mut self.coarse, &mut self.adam_coarse, t, lr, &eval.grads_coarse)?;
        apply_update(&mut self.fine, &mut self.adam_fine, t, lr, &eval.grads_fine)?;
        self.step += 1;
        Ok(eval.report)
    }

    /// Full-frame render at evaluation settings.
    pub fn render(&self, camera: &CameraModel) -> Result<RenderOutput> {
        render_image(
            &self.coarse,
            &self.fine,
            camera,
            &self.cfg.sampling,
            self.cfg.variant,
            self.cfg.background,
        )
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"DDNT")?;
        w.write_all(&1u32.to_le_bytes())?;
        let s = &self.cfg.sampling;
        w.write_all(&[
            self.cfg.variant.tag(),
            u8::from(s.jitter),
            u8::from(s.unbounded),
            smoothing_tag(s.smoothing),
            u8::from(self.cfg.loss.kl_forward),
            0,
            0,
            0,
        ])?;
        w.write_all(&(s.n_coarse as u32).to_le_bytes())?;
        w.write_all(&(s.n_fine as u32).to_le_bytes())?;
        for v in [self.step, self.cfg.total_steps, self.cfg.schedule.decay_steps, s.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [
            s.near,
            s.far,
            self.cfg.loss.lambda_de,
            self.cfg.loss.lambda_mu,
            self.cfg.loss.lambda_sigma,
            self.cfg.loss.kl_epsilon,
            self.cfg.schedule.u_start,
            self.cfg.lr_start,
            self.cfg.lr_end,
            self.cfg.background[0],
            self.cfg.background[1],
            self.cfg.background[2],
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.rng.get_seed())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
        w.write_all(&self.rng.get_stream().to_le_bytes())?;
        self.coarse.write_checkpoint(w)?;
        self.fine.write_checkpoint(w)?;
        for buf in [
            &self.adam_coarse.m,
            &self.adam_coarse.v,
            &self.adam_fine.m,
            &self.adam_fine.v,
        ] {
            for &v in buf.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"DDNT" {
            return Err(DdError::Format("bad training checkpoint magic".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(DdError::Format(format!("unsupported training checkpoint version {version}")));
        }
        let mut flags = [0u8; 8];
        r.read_exact(&mut flags)?;
        let variant = Variant::from_tag(flags[0])?;
        let n_coarse = read_u32(r)? as usize;
        let n_fine = read_u32(r)? as usize;
        let step = read_u64(r)?;
        let total_steps = read_u64(r)?;
        let decay_steps = read_u64(r)?;
        let seed = read_u64(r)?;
        let mut f = [0.0; 12];
        for v in &mut f {
            *v = read_f64(r)?;
        }
        let sampling = SamplingConfig {
            n_coarse,
            n_fine,
            near: f[0],
            far: f[1],
            jitter: flags[1] != 0,
            smoothing: smoothing_from_tag(flags[3])?,
            unbounded: flags[2] != 0,
            seed,
        };
        let cfg = TrainStateConfig {
            sampling,
            loss: LossConfig {
                lambda_de: f[2],
                lambda_mu: f[3],
                lambda_sigma: f[4],
                kl_epsilon: f[5],
                kl_forward: flags[4] != 0,
            },
            schedule: UncertaintySchedule { u_start: f[6], decay_steps },
            variant,
            total_steps,
            lr_start: f[7],
            lr_end: f[8],
            background: [f[9], f[10], f[11]],
        };
        cfg.validate()?;
        let mut rng_seed = [0u8; 32];
        r.read_exact(&mut rng_seed)?;
        let mut word_pos = [0u8; 16];
        r.read_exact(&mut word_pos)?;
        let stream = read_u64(r)?;
        let mut rng = ChaCha8Rng::from_seed(rng_seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from_le_bytes(word_pos));
        let coarse = FieldNetwork::read_checkpoint(r)?;
        let fine = FieldNetwork::read_checkpoint(r)?;
        if !coarse.has_dist_heads || fine.has_dist_heads {
            return Err(DdError::Format("checkpoint networks have wrong head layout".into()));
        }
        let mut adam_coarse = Adam::new(coarse.mlp.param_count());
        let mut adam_fine = Adam::new(fine.mlp.param_count());
        for buf in [
            &mut adam_coarse.m,
            &mut adam_coarse.v,
            &mut adam_fine.m,
            &mut adam_fine.v,
        ] {
            for v in buf.iter_mut() {
                *v = read_f64(r)?;
            }
        }
        Ok(Self { coarse, fine, cfg, step, rng, adam_coarse, adam_fine })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        self.write_checkpoint(&mut w)?;
        drop(w);
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut r)
    }
}

fn smoothing_tag(m: SmoothingMode) -> u8 {
    match m {
        SmoothingMode::Blur3 => 0,
        SmoothingMode::Max2Blur2 => 1,
    }
}

fn smoothing_from_tag(t: u8) -> Result<SmoothingMode> {
    match t {
        0 => Ok(SmoothingMode::Blur3),
        1 => Ok(SmoothingMode::Max2Blur2),
        _ => Err(DdError::Format(format!("unknown smoothing tag {t}"))),
    }
}

fn apply_update(net: &mut FieldNetwork, adam: &mut Adam, t: u64, lr: f64, grads: &[f64]) -> Result<()> {
    let mut params = vec![0.0; net.mlp.param_count()];
    net.mlp.write_params(&mut params);
    adam.update(t, lr, &mut params, grads);
    if params.iter().any(|p| !p.is_finite()) {
        return Err(DdError::TrainingAborted("non-finite parameter after update".into()));
    }
    net.mlp.read_params(&params)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Per-ray values carried from the coarse stage into the loss and backward
/// passes.
struct RayCtx {
    colors: Vec<Rgb>,
    dens_raw: Vec<f64>,
    alphas: Vec<f64>,
    weights: Vec<f64>,
    pixel: Rgb,
    h: DiscreteDepthPdf,
    mu_raw: Vec<f64>,
    sigma_raw: Vec<f64>,
    mu_rel: Vec<f64>,
    sigma_rel: Vec<f64>,
    mu_mask: Vec<bool>,
    sigma_mask: Vec<bool>,
    /// Mixture over the raw weights at u = 1: the distribution the DE loss
    /// is computed against (smoothing and widening apply to sampling only).
    mixture_de: DepthMixture,
    samples: Vec<f64>,
    fine_part: RayIntervalSet,
}

/// Evaluates one batch end to end and accumulates analytic gradients. The
/// fine sample positions and the fine histogram are treated as constants
/// (no gradient flows through sampling or into the DE target). Passing
/// `samples_override` replays fixed sample positions, which makes the loss a
/// smooth function of the parameters for finite-difference verification.
#[allow(clippy::too_many_arguments)]
/// Evaluates the full training loss and its parameter gradients over a ray
/// batch without touching optimizer or RNG state. `samples_override` replaces
/// the fine sample positions (normally drawn from the guide distribution);
/// since those positions are constants of the gradient computation, freezing
/// them makes the loss a smooth function of the parameters, which is what
/// finite-difference verification needs.
pub fn forward_backward(
    coarse: &FieldNetwork,
    fine: &FieldNetwork,
    cfg: &TrainStateConfig,
    u: f64,
    rays: &[Ray],
    gt: &[Rgb],
    parts: &[RayIntervalSet],
    quantiles: &[Vec<f64>],
    samples_override: Option<&[Vec<f64>]>,
) -> Result<StepEval> {
    let b = rays.len();
    let n_c = cfg.sampling.n_coarse;
    let n_f = cfg.sampling.n_fine;
    let bg = cfg.background;
    let lambda_de = if cfg.variant == Variant::Dd { cfg.loss.lambda_de } else { 0.0 };
    let bf = b as f64;

    // ---- coarse stage, batched over every (ray, interval) pair ----
    let mut positions = Vec::with_capacity(b * n_c);
    for (ray, part) in rays.iter().zip(parts) {
        for i in 0..n_c {
            positions.push(ray.point_at(part.midpoint(i)));
        }
    }
    let enc = coarse.encode_batch(&positions);
    let (out_c, cache_c) = coarse.forward_encoded(enc.view());

    let mut ctxs = Vec::with_capacity(b);
    for (ri, part) in parts.iter().enumerate() {
        let mut colors = Vec::with_capacity(n_c);
        let mut dens_raw = Vec::with_capacity(n_c);
        let mut alphas = Vec::with_capacity(n_c);
        let mut mu_raw = Vec::with_capacity(n_c);
        let mut sigma_raw = Vec::with_capacity(n_c);
        let mut mu_rel = Vec::with_capacity(n_c);
        let mut sigma_rel = Vec::with_capacity(n_c);
        let mut mu_mask = Vec::with_capacity(n_c);
        let mut sigma_mask = Vec::with_capacity(n_c);
        for i in 0..n_c {
            let row = out_c.row(ri * n_c + i);
            colors.push([sigmoid(row[HEAD_RGB]), sigmoid(row[HEAD_RGB + 1]), sigmoid(row[HEAD_RGB + 2])]);
            dens_raw.push(row[HEAD_DENSITY]);
            alphas.push(opacity_from_density(softplus(row[HEAD_DENSITY]), part.delta(i))?);
            let (mr, sr) = (row[HEAD_MU], row[HEAD_SIGMA]);
            let m = sigmoid(mr);
            let s = sigmoid(sr);
            mu_raw.push(mr);
            sigma_raw.push(sr);
            mu_rel.push(m.clamp(MU_REL_EPS, 1.0 - MU_REL_EPS));
            sigma_rel.push(s.clamp(SIGMA_REL_MIN, 1.0 - 1e-6));
            mu_mask.push(m > MU_REL_EPS && m < 1.0 - MU_REL_EPS);
            sigma_mask.push(s > SIGMA_REL_MIN && s < 1.0 - 1e-6);
        }
        let weights = compositing_weights(&alphas);
        let pixel = composite_color_over(&weights, &colors, bg)?;
        let h = normalize_to_pdf(&weights, part)?;
        let h_s = if n_c >= 2 { smooth_discrete_pdf(&h, cfg.sampling.smoothing)? } else { h.clone() };
        let gaussians = (0..n_c)
            .map(|i| build_interval_gaussian(mu_rel[i], sigma_rel[i], part.t_lo(i), part.t_hi(i)))
            .collect::<Result<Vec<_>>>()?;
        let mixture_de = DepthMixture::new(h.clone(), gaussians.clone(), 1.0)?;
        let mixture_sampling = DepthMixture::new(h_s.clone(), gaussians, u)?;
        let samples = match samples_override {
            Some(s) => s[ri].clone(),
            None => match cfg.variant {
                Variant::Dd => mixture_sampling.inverse_cdf_sample(&quantiles[ri])?,
                Variant::Baseline => h_s.inverse_cdf_sample(&quantiles[ri])?,
            },
        };
        let fine_part = fine_partition_from_samples(&samples, part.t_min(), part.t_max())?;
        ctxs.push(RayCtx {
            colors,
            dens_raw,
            alphas,
            weights,
            pixel,
            h,
            mu_raw,
            sigma_raw,
            mu_rel,
            sigma_rel,
            mu_mask,
            sigma_mask,
            mixture_de,
            samples,
            fine_part,
        });
    }

    // ---- fine stage, batched ----
    let mut fine_positions = Vec::with_capacity(b * n_f);
    for (ray, ctx) in rays.iter().zip(&ctxs) {
        for &t in &ctx.samples {
            fine_positions.push(ray.point_at(t));
        }
    }
    let enc_f = fine.encode_batch(&fine_positions);
    let (out_f, cache_f) = fine.forward_encoded(enc_f.view());

    struct FineCtx {
        colors: Vec<Rgb>,
        dens_raw: Vec<f64>,
        alphas: Vec<f64>,
        weights: Vec<f64>,
        pixel: Rgb,
        h: DiscreteDepthPdf,
    }
    let mut fine_ctxs = Vec::with_capacity(b);
    for (ri, ctx) in ctxs.iter().enumerate() {
        let mut colors = Vec::with_capacity(n_f);
        let mut dens_raw = Vec::with_capacity(n_f);
        let mut alphas = Vec::with_capacity(n_f);
        for i in 0..n_f {
            let row = out_f.row(ri * n_f + i);
            colors.push([sigmoid(row[HEAD_RGB]), sigmoid(row[HEAD_RGB + 1]), sigmoid(row[HEAD_RGB + 2])]);
            dens_raw.push(row[HEAD_DENSITY]);
            alphas.push(opacity_from_density(softplus(row[HEAD_DENSITY]), ctx.fine_part.delta(i))?);
        }
        let weights = compositing_weights(&alphas);
        let pixel = composite_color_over(&weights, &colors, bg)?;
        let h = normalize_to_pdf(&weights, &ctx.fine_part)?;
        fine_ctxs.push(FineCtx { colors, dens_raw, alphas, weights, pixel, h });
    }

    // ---- losses ----
    let mut photo_c = 0.0;
    let mut photo_f = 0.0;
    let mut kl_sum = 0.0;
    let mut mu_reg_sum = 0.0;
    let mut sigma_reg_sum = 0.0;
    let mut h_hats: Vec<Option<DiscreteDepthPdf>> = vec![None; b];
    for ri in 0..b {
        for ch in 0..3 {
            photo_c += (gt[ri][ch] - ctxs[ri].pixel[ch]).powi(2);
            photo_f += (gt[ri][ch] - fine_ctxs[ri].pixel[ch]).powi(2);
        }
        if lambda_de > 0.0 {
            let h_hat = estimate_fine_hist(&ctxs[ri].mixture_de, &ctxs[ri].fine_part)?;
            let (_, comps) = de_loss(
                &fine_ctxs[ri].h,
                &h_hat,
                &ctxs[ri].mu_raw,
                &ctxs[ri].sigma_raw,
                &cfg.loss,
            )?;
            // degenerate histograms carry no depth information: no KL term
            if !h_hat.degenerate() && !fine_ctxs[ri].h.degenerate() {
                kl_sum += comps.kl;
            }
            mu_reg_sum += comps.mu_reg;
            sigma_reg_sum += comps.sigma_reg;
            h_hats[ri] = Some(h_hat);
        }
    }
    photo_c /= bf;
    photo_f /= bf;
    kl_sum /= bf;
    mu_reg_sum /= bf;
    sigma_reg_sum /= bf;
    let report = LossReport {
        photometric_coarse: photo_c,
        photometric_fine: photo_f,
        kl_term: kl_sum,
        mu_reg: mu_reg_sum,
        sigma_reg: sigma_reg_sum,
        total: photo_c + photo_f + lambda_de * (kl_sum + mu_reg_sum + sigma_reg_sum),
    };

    // ---- backward ----
    let mut gout_c = Array2::<f64>::zeros((b * n_c, coarse.output_dim()));
    let mut gout_c_de = Array2::<f64>::zeros((b * n_c, coarse.output_dim()));
    let mut gout_f = Array2::<f64>::zeros((b * n_f, fine.output_dim()));
    for ri in 0..b {
        let ctx = &ctxs[ri];
        let fctx = &fine_ctxs[ri];
        let part = &parts[ri];

        // fine network: photometric only (the DE target is detached)
        let mut g_color_f = [0.0; 3];
        for ch in 0..3 {
            g_color_f[ch] = 2.0 * (fctx.pixel[ch] - gt[ri][ch]) / bf;
        }
        let gw_f: Vec<f64> = (0..n_f)
            .map(|i| (0..3).map(|ch| g_color_f[ch] * (fctx.colors[i][ch] - bg[ch])).sum())
            .collect();
        let ga_f = weights_to_alpha_backward(&gw_f, &fctx.alphas);
        for i in 0..n_f {
            let r = ri * n_f + i;
            for ch in 0..3 {
                gout_f[(r, HEAD_RGB + ch)] =
                    g_color_f[ch] * fctx.weights[i] * sigmoid_deriv_from_output(fctx.colors[i][ch]);
            }
            gout_f[(r, HEAD_DENSITY)] = ga_f[i]
                * ctx.fine_part.delta(i)
                * (1.0 - fctx.alphas[i])
                * softplus_deriv(fctx.dens_raw[i]);
        }

        // coarse network: photometric plus the distribution-estimation path.
        // The DE term trains only the distribution heads; the mixture weights
        // h act as constants there (density learns from the photometric loss
        // alone, which keeps the two objectives from fighting over it).
        let mut g_color_c = [0.0; 3];
        for ch in 0..3 {
            g_color_c[ch] = 2.0 * (ctx.pixel[ch] - gt[ri][ch]) / bf;
        }
        let gw: Vec<f64> = (0..n_c)
            .map(|i| (0..3).map(|ch| g_color_c[ch] * (ctx.colors[i][ch] - bg[ch])).sum())
            .collect();
        let mut g_mu_head = vec![0.0; n_c];
        let mut g_sigma_head = vec![0.0; n_c];
        if lambda_de > 0.0 {
            let scale = lambda_de / bf;
            for i in 0..n_c {
                g_mu_head[i] += scale * 2.0 * cfg.loss.lambda_mu * ctx.mu_raw[i] / n_c as f64;
                g_sigma_head[i] +=
                    scale * 2.0 * cfg.loss.lambda_sigma * ctx.sigma_raw[i] / n_c as f64;
            }
            let h_hat = h_hats[ri].as_ref().unwrap();
            if !h_hat.degenerate() && !fctx.h.degenerate() {
                let eps = cfg.loss.kl_epsilon;
                let target = floor_and_renormalize(fctx.h.mass(), eps);
                let est = floor_and_renormalize(h_hat.mass(), eps);
                let g_est = kl_grad_wrt_estimate(&est, &target, cfg.loss.kl_forward);
                let g_hat = floor_renorm_backward(&g_est, h_hat.mass(), eps);
                // back out the pre-normalization CDF-difference masses
                let cdf_vals: Vec<f64> =
                    ctx.fine_part.partitions().iter().map(|&t| ctx.mixture_de.cdf(t)).collect();
                let raw: Vec<f64> =
                    cdf_vals.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
                let s_raw: f64 = raw.iter().sum();
                let g_raw = normalize_backward(&g_hat, h_hat.mass(), s_raw);
                let mut g_cdf = vec![0.0; n_f + 1];
                for j in 0..n_f {
                    if cdf_vals[j + 1] - cdf_vals[j] > 0.0 {
                        g_cdf[j + 1] += g_raw[j];
                        g_cdf[j] -= g_raw[j];
                    }
                }
                // mixture CDF at interior partition points: the endpoints
                // clamp to 0 and 1 and carry no gradient
                let hmass = ctx.h.mass();
                let eff = ctx.mixture_de.components();
                let mut g_mu_abs = vec![0.0; n_c];
                let mut g_sigma_eff = vec![0.0; n_c];
                for k in 1..n_f {
                    let g = g_cdf[k];
                    if g == 0.0 {
                        continue;
                    }
                    let t = ctx.fine_part.partitions()[k];
                    let Some(i) = part.locate(t) else { continue };
                    let (lo, hi) = (part.t_lo(i), part.t_hi(i));
                    let (dmu, dsig) = truncated_cdf_param_grads(&eff[i], lo, hi, t);
                    g_mu_abs[i] += g * hmass[i] * dmu;
                    g_sigma_eff[i] += g * hmass[i] * dsig;
                }
                for i in 0..n_c {
                    let delta = part.delta(i);
                    if ctx.mu_mask[i] {
                        g_mu_head[i] += scale
                            * g_mu_abs[i]
                            * delta
                            * sigmoid_deriv_from_output(ctx.mu_rel[i]);
                    }
                    if ctx.sigma_mask[i] {
                        g_sigma_head[i] += scale
                            * g_sigma_eff[i]
                            * delta
                            * sigmoid_deriv_from_output(ctx.sigma_rel[i]);
                    }
                }
            }
        }
        let ga = weights_to_alpha_backward(&gw, &ctx.alphas);
        for i in 0..n_c {
            let r = ri * n_c + i;
            for ch in 0..3 {
                gout_c[(r, HEAD_RGB + ch)] =
                    g_color_c[ch] * ctx.weights[i] * sigmoid_deriv_from_output(ctx.colors[i][ch]);
            }
            gout_c[(r, HEAD_DENSITY)] =
                ga[i] * part.delta(i) * (1.0 - ctx.alphas[i]) * softplus_deriv(ctx.dens_raw[i]);
            gout_c_de[(r, HEAD_MU)] = g_mu_head[i];
            gout_c_de[(r, HEAD_SIGMA)] = g_sigma_head[i];
        }
    }

    // the photometric path trains the whole coarse network; the DE path is
    // confined to the head columns of the final layer so it cannot disturb
    // the trunk features the density and color heads rely on
    let (mut grads_c, _) = coarse.mlp.backward(&cache_c, gout_c.view());
    if lambda_de > 0.0 {
        let de = coarse.mlp.backward_last_layer(&cache_c, gout_c_de.view());
        for (g, d) in grads_c.flat.iter_mut().zip(&de.flat) {
            *g += d;
        }
    }
    let (grads_f, _) = fine.mlp.backward(&cache_f, gout_f.view());
    Ok(StepEval {
        report,
        grads_coarse: grads_c.flat,
        grads_fine: grads_f.flat,
        samples: ctxs.into_iter().map(|c| c.samples).collect(),
    })
}
