//! Opacity, compositing weights, color/depth rendering, image buffers with
//! PPM/PGM persistence, and the PSNR/SSIM quality metrics.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{DdError, Result};
use crate::ray_distribution::{DepthMixture, DiscreteDepthPdf, RayIntervalSet};

pub type Rgb = [f64; 3];

/// Per-interval density and color samples along one ray.
#[derive(Debug, Clone)]
pub struct DensitySamples {
    pub intervals: RayIntervalSet,
    pub densities: Vec<f64>,
    pub colors: Vec<Rgb>,
}

impl DensitySamples {
    pub fn new(intervals: RayIntervalSet, densities: Vec<f64>, colors: Vec<Rgb>) -> Result<Self> {
        let n = intervals.n();
        if densities.len() != n || colors.len() != n {
            return Err(DdError::DimensionMismatch(format!(
                "{} densities / {} colors for {} intervals",
                densities.len(),
                colors.len(),
                n
            )));
        }
        for &d in &densities {
            if !d.is_finite() || d < 0.0 {
                return Err(DdError::InvalidInput(format!("bad density {d}")));
            }
        }
        Ok(Self { intervals, densities, colors })
    }
}

/// The composited output of one ray.
#[derive(Debug, Clone)]
pub struct CompositeResult {
    pub pixel_color: Rgb,
    pub weights: Vec<f64>,
    pub accumulated_opacity: f64,
    pub expected_depth: f64,
}

/// alpha = 1 - exp(-sigma * delta).
pub fn opacity_from_density(sigma: f64, delta: f64) -> Result<f64> {
    if !sigma.is_finite() || !delta.is_finite() || sigma < 0.0 || delta <= 0.0 {
        return Err(DdError::InvalidInput(format!(
            "opacity needs sigma >= 0 and delta > 0, got ({sigma}, {delta})"
        )));
    }
    Ok(-(-sigma * delta).exp_m1())
}

/// w_i = alpha_i * prod_{j<i} (1 - alpha_j).
pub fn compositing_weights(alphas: &[f64]) -> Vec<f64> {
    let mut transmittance = 1.0;
    alphas
        .iter()
        .map(|&a| {
            let w = a * transmittance;
            transmittance *= 1.0 - a;
            w
        })
        .collect()
}

/// C = sum w_i c_i, channels clamped to [0,1] only at output.
pub fn composite_color(weights: &[f64], colors: &[Rgb]) -> Result<Rgb> {
    composite_color_over(weights, colors, [0.0; 3])
}

/// Composites against a solid background: the residual transparency
/// 1 - sum(w) picks up the background color.
pub fn composite_color_over(weights: &[f64], colors: &[Rgb], background: Rgb) -> Result<Rgb> {
    if weights.len() != colors.len() {
        return Err(DdError::DimensionMismatch(format!(
            "{} weights vs {} colors",
            weights.len(),
            colors.len()
        )));
    }
    let mut out = [0.0; 3];
    let mut acc = 0.0;
    for (w, c) in weights.iter().zip(colors) {
        acc += w;
        for ch in 0..3 {
            out[ch] += w * c[ch];
        }
    }
    let residual = (1.0 - acc).max(0.0);
    for ch in 0..3 {
        out[ch] = (out[ch] + residual * background[ch]).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Expected depth of a discrete PDF using bin midpoints.
pub fn expected_depth_discrete(pdf: &DiscreteDepthPdf) -> f64 {
    pdf.mass()
        .iter()
        .enumerate()
        .map(|(i, m)| m * pdf.intervals().midpoint(i))
        .sum()
}

/// Expected depth of the mixture, via the closed-form truncated-normal mean.
pub fn expected_depth_mixture(m: &DepthMixture) -> f64 {
    let iv = m.intervals();
    m.weights()
        .mass()
        .iter()
        .zip(m.components())
        .enumerate()
        .map(|(i, (w, g))| w * g.truncated_mean(iv.t_lo(i), iv.t_hi(i)))
        .sum()
}

/// An RGB image with channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![[0.0; 3]; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        self.pixels[y * self.width + x] = c;
    }

    /// Binary PPM (P6, 8-bit).
    pub fn write_ppm<W: Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.pixels.len() * 3);
        for p in &self.pixels {
            for ch in 0..3 {
                bytes.push((p[ch].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm(&mut f)
    }

    pub fn read_ppm<R: Read>(r: &mut R) -> Result<Self> {
        let mut br = BufReader::new(r);
        let (magic, dims, maxval) = read_pnm_header(&mut br)?;
        if magic != "P6" {
            return Err(DdError::Format(format!("expected P6, got {magic}")));
        }
        if maxval != 255 {
            return Err(DdError::Format(format!("expected maxval 255, got {maxval}")));
        }
        let (width, height) = dims;
        let mut bytes = vec![0u8; width * height * 3];
        br.read_exact(&mut bytes)?;
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
            .collect();
        Ok(Self { width, height, pixels })
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_ppm(&mut f)
    }
}

/// A single-channel map with values in [0, 1] (depth or disparity after
/// linear normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl GrayMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    /// Binary PGM (P5, 16-bit big-endian samples).
    pub fn write_pgm<W: Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.values.len() * 2);
        for &v in &self.values {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            bytes.extend_from_slice(&q.to_be_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_pgm(&mut f)
    }

    pub fn read_pgm<R: Read>(r: &mut R) -> Result<Self> {
        let mut br = BufReader::new(r);
        let (magic, dims, maxval) = read_pnm_header(&mut br)?;
        if magic != "P5" {
            return Err(DdError::Format(format!("expected P5, got {magic}")));
        }
        if maxval != 65535 {
            return Err(DdError::Format(format!("expected maxval 65535, got {maxval}")));
        }
        let (width, height) = dims;
        let mut bytes = vec![0u8; width * height * 2];
        br.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect();
        Ok(Self { width, height, values })
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_pgm(&mut f)
    }
}

fn read_pnm_header<R: BufRead>(r: &mut R) -> Result<(String, (usize, usize), u32)> {
    let mut fields = Vec::new();
    while fields.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(DdError::Format("truncated PNM header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        fields.extend(line.split_whitespace().map(str::to_owned));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| DdError::Format(format!("bad header field {s}")))
    };
    Ok((
        fields[0].clone(),
        (parse(&fields[1])?, parse(&fields[2])?),
        parse(&fields[3])? as u32,
    ))
}

/// PSNR in dB; identical images report +infinity.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(DdError::DimensionMismatch("psnr image sizes differ".into()));
    }
    let mut mse = 0.0;
    for (pa, pb) in a.pixels.iter().zip(&b.pixels) {
        for ch in 0..3 {
            let d = pa[ch] - pb[ch];
            mse += d * d;
        }
    }
    mse /= (a.pixels.len() * 3) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean SSIM over an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
/// dynamic range 1, averaged over channels and valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(DdError::DimensionMismatch("ssim image sizes differ".into()));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(DdError::InvalidInput(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let mut kernel = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut ksum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as f64 - half;
            let dy = y as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            kernel[y * SSIM_WINDOW + x] = v;
            ksum += v;
        }
    }
    for v in &mut kernel {
        *v /= ksum;
    }

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for wy in 0..=(a.height - SSIM_WINDOW) {
            for wx in 0..=(a.width - SSIM_WINDOW) {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..SSIM_WINDOW {
                    for x in 0..SSIM_WINDOW {
                        let k = kernel[y * SSIM_WINDOW + x];
                        let pa = a.at(wx + x, wy + y)[ch];
                        let pb = b.at(wx + x, wy + y)[ch];
                        ma += k * pa;
                        mb += k * pb;
                        va += k * pa * pa;
                        vb += k * pb * pb;
                        cov += k * pa * pb;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
