//! Shared oracles for the integration suites. Everything here is computed
//! independently of the library's own numerics: integrals by composite
//! Simpson quadrature, and the normal CDF by integrating the density rather
//! than via an error-function implementation.

#![allow(dead_code)]

use std::f64::consts::PI;

use ddnerf::ray_distribution::{
    build_interval_gaussian, normalize_to_pdf, DepthMixture, RayIntervalSet, SIGMA_REL_MIN,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A randomized depth mixture over `n` intervals: random strictly increasing
/// partitions, random (occasionally zero) weights, random per-interval
/// Gaussian parameters, uncertainty factor `u`.
pub fn random_mixture(rng: &mut ChaCha8Rng, n: usize, u: f64) -> DepthMixture {
    let near = 0.1 + rng.random::<f64>();
    let far = near + 1.0 + 5.0 * rng.random::<f64>();
    let mut points: Vec<f64> = (0..=n)
        .map(|i| near + (far - near) * i as f64 / n as f64)
        .collect();
    // jitter the interior points while keeping strict monotonicity
    for i in 1..n {
        let room = (points[i + 1] - points[i - 1]) / 2.2;
        points[i] += room * (rng.random::<f64>() - 0.5);
    }
    let intervals = RayIntervalSet::new(points).unwrap();
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < 0.15 {
                0.0
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    let weights = normalize_to_pdf(&raw, &intervals).unwrap();
    let gaussians = (0..n)
        .map(|i| {
            let mu_rel = 0.02 + 0.96 * rng.random::<f64>();
            let sigma_rel = SIGMA_REL_MIN + (0.999 - SIGMA_REL_MIN) * rng.random::<f64>();
            build_interval_gaussian(mu_rel, sigma_rel, intervals.t_lo(i), intervals.t_hi(i))
                .unwrap()
        })
        .collect();
    DepthMixture::new(weights, gaussians, u).unwrap()
}

/// Composite Simpson quadrature with `n` subintervals (rounded up to even).
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Standard normal density.
pub fn normal_pdf_oracle(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF by quadrature of the density from 0 to z; accurate to
/// well below 1e-10 for |z| <= 12 at the chosen resolution.
pub fn normal_cdf_oracle(z: f64) -> f64 {
    if z < -12.0 {
        return 0.0;
    }
    if z > 12.0 {
        return 1.0;
    }
    let n = (256.0 * z.abs()).ceil().max(64.0) as usize;
    0.5 + simpson(&normal_pdf_oracle, 0.0, z, n)
}

/// All structural checks for one mixture; returns a description of the first
/// violated property.
pub fn check_mixture(m: &DepthMixture) -> Result<(), String> {
    let iv = m.intervals();
    let n = iv.n();
    let w = m.weights().mass();
    let comps = m.components();

    // the density integrates to exactly the interval weight inside each
    // interval (quadrature oracle), hence to 1 overall
    let mut total = 0.0;
    for i in 0..n {
        let (lo, hi) = (iv.t_lo(i), iv.t_hi(i));
        // resolve the component's width: sharp truncated Gaussians need a
        // step well below sigma for Simpson to hit the 1e-6 budget
        let subs = if comps[i].uniform_fallback {
            200
        } else {
            ((80.0 * (hi - lo) / comps[i].sigma_abs) as usize).clamp(200, 200_000)
        };
        // bins are right-open, so pdf(hi) belongs to the next interval;
        // nudge the quadrature nodes into the open interval
        let nudge = 1e-12 * (hi - lo);
        let mass = simpson(&|t| m.pdf(t.clamp(lo + nudge, hi - nudge)), lo, hi, subs);
        if (mass - w[i]).abs() > 5e-7 {
            return Err(format!("interval {i} mass {mass} vs weight {}", w[i]));
        }
        total += mass;
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(format!("density integrates to {total}"));
    }

    // truncation locality: inside interval i only component i contributes
    for i in 0..n {
        let (lo, hi) = (iv.t_lo(i), iv.t_hi(i));
        for frac in [0.11, 0.5, 0.93] {
            let t = lo + frac * (hi - lo);
            let expect = w[i] * ddnerf::ray_distribution::truncated_pdf_eval(&comps[i], lo, hi, t);
            let got = m.pdf(t);
            if (got - expect).abs() > 1e-12 * expect.abs().max(1.0) {
                return Err(format!("locality violated at t={t}: {got} vs {expect}"));
            }
        }
    }

    // CDF: 0 at t_min, 1 at t_max, monotone on a grid
    let (tmin, tmax) = (iv.t_min(), iv.t_max());
    if m.cdf(tmin).abs() > 1e-12 || (m.cdf(tmax) - 1.0).abs() > 1e-9 {
        return Err(format!("cdf endpoints {} {}", m.cdf(tmin), m.cdf(tmax)));
    }
    let mut prev = 0.0;
    for k in 0..=64 {
        let t = tmin + (tmax - tmin) * k as f64 / 64.0;
        let c = m.cdf(t);
        if c < prev - 1e-14 {
            return Err(format!("cdf decreases at t={t}"));
        }
        prev = c;
    }

    // inverse-CDF round trip
    let quantiles: Vec<f64> = (0..33).map(|k| (k as f64 + 0.5) / 33.0).collect();
    let samples = m.inverse_cdf_sample(&quantiles).map_err(|e| e.to_string())?;
    for (q, t) in quantiles.iter().zip(&samples) {
        let back = m.cdf(*t);
        if (back - q).abs() > 1e-8 {
            return Err(format!("round trip: q={q} -> t={t} -> {back}"));
        }
    }
    Ok(())
}

/// Randomized mixture sweep: `trials` mixtures over n in {2,4,8,16} with a
/// few uncertainty factors. Returns the number of mixtures checked.
pub fn distribution_suite(trials: usize, seed: u64) -> Result<usize, String> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [2usize, 4, 8, 16];
    let us = [1.0, 1.4, 2.5];
    for trial in 0..trials {
        let n = sizes[trial % sizes.len()];
        let u = us[trial % us.len()];
        let m = random_mixture(&mut rng, n, u);
        check_mixture(&m).map_err(|e| format!("trial {trial} (n={n}, u={u}): {e}"))?;
    }
    Ok(trials)
}

/// One finite-difference comparison: perturb coarse or fine parameter `pi`,
/// re-evaluate the frozen-sample loss, compare the central difference with
/// the analytic gradient.
#[allow(clippy::too_many_arguments)]
fn fd_check(
    state: &ddnerf::sampling_pipeline::TrainState,
    cfg: &ddnerf::sampling_pipeline::TrainStateConfig,
    u: f64,
    rays: &[ddnerf::radiance_field::Ray],
    gt: &[[f64; 3]],
    parts: &[RayIntervalSet],
    quantiles: &[Vec<f64>],
    samples: &[Vec<f64>],
    on_coarse: bool,
    indices: &[usize],
    analytic: &[f64],
) -> Result<(), String> {
    use ddnerf::sampling_pipeline::forward_backward;
    let mut net = if on_coarse { state.coarse.clone() } else { state.fine.clone() };
    let mut params = vec![0.0; net.mlp.param_count()];
    net.mlp.write_params(&mut params);
    let h = 1e-5;
    for &pi in indices {
        let orig = params[pi];
        let mut eval = |p: f64| -> Result<f64, String> {
            params[pi] = p;
            net.mlp.read_params(&params).map_err(|e| e.to_string())?;
            let e = if on_coarse {
                forward_backward(&net, &state.fine, cfg, u, rays, gt, parts, quantiles, Some(samples))
            } else {
                forward_backward(&state.coarse, &net, cfg, u, rays, gt, parts, quantiles, Some(samples))
            };
            Ok(e.map_err(|e| e.to_string())?.report.total)
        };
        let f_plus = eval(orig + h)?;
        let f_minus = eval(orig - h)?;
        params[pi] = orig;
        net.mlp.read_params(&params).map_err(|e| e.to_string())?;
        let fd = (f_plus - f_minus) / (2.0 * h);
        let denom = fd.abs().max(analytic[pi].abs()).max(1e-4);
        if (fd - analytic[pi]).abs() / denom >= 1e-4 {
            return Err(format!(
                "{} param {pi}: analytic {} vs fd {fd}",
                if on_coarse { "coarse" } else { "fine" },
                analytic[pi]
            ));
        }
    }
    Ok(())
}

/// Randomized gradient sweep: for each instance, the photometric path is
/// checked across both networks' parameters and the distribution-matching
/// path across the coarse head columns (perturbing those cannot move the
/// mixture weights, which the matching term holds constant).
pub fn gradient_suite(instances: usize, seed: u64) -> Result<usize, String> {
    use ddnerf::radiance_field::{Activation, Ray, HEAD_MU, HEAD_SIGMA};
    use ddnerf::sampling_pipeline::{
        coarse_partition, forward_backward, stratified_quantiles, SamplingConfig, TrainState,
        TrainStateConfig, Variant,
    };
    use rand::SeedableRng;

    let hidden = [10usize, 10];
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(inst as u64));
        let n = 3 + inst % 3;
        let near = 0.3 + rng.random::<f64>();
        let far = near + 2.0 + 2.0 * rng.random::<f64>();
        let mut sampling = SamplingConfig::new(n, n, near, far);
        sampling.jitter = false;
        sampling.seed = 1000 + inst as u64;
        let bg = [0.5 * rng.random::<f64>(), 0.5 * rng.random::<f64>(), 0.5 * rng.random::<f64>()];
        let cfg = TrainStateConfig::new(sampling, Variant::Dd, 100, bg);
        let act = if inst % 2 == 0 { Activation::Tanh } else { Activation::Softplus };
        let state = TrainState::new(cfg.clone(), &hidden, 2, act).map_err(|e| e.to_string())?;
        let rays: Vec<Ray> = (0..2)
            .map(|_| {
                let d = [
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    0.5 + rng.random::<f64>(),
                ];
                let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                Ray {
                    origin: [0.2 * rng.random::<f64>(), 0.2 * rng.random::<f64>(), 0.0],
                    direction: [d[0] / norm, d[1] / norm, d[2] / norm],
                    near,
                    far,
                }
            })
            .collect();
        let gt: Vec<[f64; 3]> =
            (0..2).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let parts: Vec<RayIntervalSet> = rays
            .iter()
            .map(|r| coarse_partition(r, &cfg.sampling, None))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let quantiles: Vec<Vec<f64>> =
            rays.iter().map(|_| stratified_quantiles(n, false, None)).collect();
        let u = 1.0 + 1.5 * rng.random::<f64>();

        // full loss (matching term + regularizers) on the head columns
        let base = forward_backward(
            &state.coarse, &state.fine, &cfg, u, &rays, &gt, &parts, &quantiles, None,
        )
        .map_err(|e| e.to_string())?;
        let n_params = state.coarse.mlp.param_count();
        let n_heads = 6;
        let in_dim = *hidden.last().unwrap();
        let w_off = n_params - (in_dim * n_heads + n_heads);
        let b_off = n_params - n_heads;
        let mut head_idx = Vec::new();
        for r in (0..in_dim).step_by(3) {
            head_idx.push(w_off + r * n_heads + HEAD_MU);
            head_idx.push(w_off + r * n_heads + HEAD_SIGMA);
        }
        head_idx.push(b_off + HEAD_MU);
        head_idx.push(b_off + HEAD_SIGMA);
        fd_check(
            &state, &cfg, u, &rays, &gt, &parts, &quantiles, &base.samples, true, &head_idx,
            &base.grads_coarse,
        )
        .map_err(|e| format!("instance {inst} (matching path): {e}"))?;

        // photometric path across both networks
        let mut cfg_p = cfg.clone();
        cfg_p.loss.lambda_de = 0.0;
        let base_p = forward_backward(
            &state.coarse, &state.fine, &cfg_p, u, &rays, &gt, &parts, &quantiles, None,
        )
        .map_err(|e| e.to_string())?;
        let coarse_idx: Vec<usize> = (0..n_params).step_by(n_params / 8 + 1).collect();
        fd_check(
            &state, &cfg_p, u, &rays, &gt, &parts, &quantiles, &base_p.samples, true, &coarse_idx,
            &base_p.grads_coarse,
        )
        .map_err(|e| format!("instance {inst} (photometric, coarse): {e}"))?;
        let nf = state.fine.mlp.param_count();
        let fine_idx: Vec<usize> = (0..nf).step_by(nf / 6 + 1).collect();
        fd_check(
            &state, &cfg_p, u, &rays, &gt, &parts, &quantiles, &base_p.samples, false, &fine_idx,
            &base_p.grads_fine,
        )
        .map_err(|e| format!("instance {inst} (photometric, fine): {e}"))?;
    }
    Ok(instances)
}

/// Two-sample Kolmogorov-Smirnov distance between sorted samples.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
