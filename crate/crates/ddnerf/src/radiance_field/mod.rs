//! Differentiable scene representations: positional encoding, small
//! fully-connected field networks with exact reverse-mode gradients, and
//! analytic density fields used as ground truth.

mod analytic;
mod encoding;
mod mlp;

pub use analytic::{AnalyticField, Primitive, FALLOFF_FRACTION};
pub use encoding::EncodingConfig;
pub use mlp::{Activation, ForwardCache, Mlp, MlpGrads};

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use rand_chacha::rand_core::RngCore;

use crate::error::{DdError, Result};
use crate::math::{sigmoid, softplus};
use crate::ray_distribution::SIGMA_REL_MIN;
use crate::volume_rendering::Rgb;

/// A camera ray with its sampling bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// Per-interval field outputs: color, density and (for coarse models) the
/// raw and sigmoid-mapped relative distribution parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalPrediction {
    pub color: Rgb,
    pub density: f64,
    pub mu_raw: f64,
    pub sigma_raw: f64,
    pub mu_rel: f64,
    pub sigma_rel: f64,
}

/// Anything that can answer an interval query along a ray: a trained network
/// or an analytic ground-truth field.
pub trait Field {
    fn query(&self, ray: &Ray, t_lo: f64, t_hi: f64) -> IntervalPrediction;
}

/// Clamp keeping the relative mean strictly inside (0, 1) so interval
/// Gaussian construction stays valid under extreme raw outputs.
pub const MU_REL_EPS: f64 = 1e-7;

/// Raw network output layout: [r, g, b, density, (mu_raw, sigma_raw)].
pub const HEAD_RGB: usize = 0;
pub const HEAD_DENSITY: usize = 3;
pub const HEAD_MU: usize = 4;
pub const HEAD_SIGMA: usize = 5;

/// An encoded-coordinate MLP with color/density heads and, on coarse
/// variants, two extra distribution heads.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldNetwork {
    pub encoding: EncodingConfig,
    pub mlp: Mlp,
    pub has_dist_heads: bool,
}

impl FieldNetwork {
    pub fn new(
        encoding: EncodingConfig,
        hidden: &[usize],
        has_dist_heads: bool,
        activation: Activation,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(encoding.output_dim(3));
        dims.extend_from_slice(hidden);
        dims.push(if has_dist_heads { 6 } else { 4 });
        Ok(Self { encoding, mlp: Mlp::new(&dims, activation, rng)?, has_dist_heads })
    }

    /// The conventional full-size configuration (8 layers of 256 would be
    /// NeRF; this repo defaults to 8 x 128, configurable everywhere).
    pub fn nerf_default(has_dist_heads: bool, rng: &mut impl RngCore) -> Result<Self> {
        Self::new(
            EncodingConfig { num_frequencies: 10, include_input: true },
            &[128; 8],
            has_dist_heads,
            Activation::Relu,
            rng,
        )
    }

    pub fn output_dim(&self) -> usize {
        if self.has_dist_heads {
            6
        } else {
            4
        }
    }

    /// Encodes a batch of query positions into MLP input rows.
    pub fn encode_batch(&self, positions: &[[f64; 3]]) -> Array2<f64> {
        let dim = self.encoding.output_dim(3);
        let mut data = Vec::with_capacity(positions.len() * dim);
        for p in positions {
            self.encoding.encode_into(p, &mut data);
        }
        Array2::from_shape_vec((positions.len(), dim), data).unwrap()
    }

    pub fn forward_encoded(&self, x: ArrayView2<f64>) -> (Array2<f64>, ForwardCache) {
        self.mlp.forward(x)
    }

    /// Maps one row of raw outputs through the head activations.
    pub fn prediction_from_raw(&self, raw: &[f64]) -> IntervalPrediction {
        let color = [sigmoid(raw[HEAD_RGB]), sigmoid(raw[HEAD_RGB + 1]), sigmoid(raw[HEAD_RGB + 2])];
        let density = softplus(raw[HEAD_DENSITY]);
        let (mu_raw, sigma_raw) = if self.has_dist_heads {
            (raw[HEAD_MU], raw[HEAD_SIGMA])
        } else {
            (0.0, 0.0)
        };
        IntervalPrediction {
            color,
            density,
            mu_raw,
            sigma_raw,
            mu_rel: sigmoid(mu_raw).clamp(MU_REL_EPS, 1.0 - MU_REL_EPS),
            sigma_rel: sigmoid(sigma_raw).clamp(SIGMA_REL_MIN, 1.0 - 1e-6),
        }
    }

    /// Serializes the network: magic "DDNF", version, layer dims, f64 LE
    /// parameters.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"DDNF")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.encoding.num_frequencies as u32).to_le_bytes())?;
        w.write_all(&[
            u8::from(self.encoding.include_input),
            u8::from(self.has_dist_heads),
            self.mlp.activation().tag(),
            0,
        ])?;
        let dims = self.mlp.dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut params = vec![0.0; self.mlp.param_count()];
        self.mlp.write_params(&mut params);
        for p in params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"DDNF" {
            return Err(DdError::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(DdError::Format(format!("unsupported checkpoint version {version}")));
        }
        let num_frequencies = read_u32(r)? as usize;
        let mut flags = [0u8; 4];
        r.read_exact(&mut flags)?;
        let encoding = EncodingConfig { num_frequencies, include_input: flags[0] != 0 };
        let has_dist_heads = flags[1] != 0;
        let activation = Activation::from_tag(flags[2])?;
        let ndims = read_u32(r)? as usize;
        if !(2..=64).contains(&ndims) {
            return Err(DdError::Format(format!("implausible layer count {ndims}")));
        }
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(read_u32(r)? as usize);
        }
        if dims[0] != encoding.output_dim(3) {
            return Err(DdError::Format("checkpoint input dim mismatch".into()));
        }
        if *dims.last().unwrap() != if has_dist_heads { 6 } else { 4 } {
            return Err(DdError::Format("checkpoint head dim mismatch".into()));
        }
        // dims are authoritative; build with a throwaway rng then overwrite
        use rand_chacha::rand_core::SeedableRng as _;
        let mut seed_rng = rand_chacha::ChaCha8Rng::from_seed([0u8; 32]);
        let mut mlp = Mlp::new(&dims, activation, &mut seed_rng)?;
        let mut params = vec![0.0; mlp.param_count()];
        let mut buf = [0u8; 8];
        for p in &mut params {
            r.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        mlp.read_params(&params)?;
        Ok(Self { encoding, mlp, has_dist_heads })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

impl Field for FieldNetwork {
    fn query(&self, ray: &Ray, t_lo: f64, t_hi: f64) -> IntervalPrediction {
        let mid = ray.point_at(0.5 * (t_lo + t_hi));
        let x = self.encode_batch(&[mid]);
        let (out, _) = self.forward_encoded(x.view());
        self.prediction_from_raw(out.row(0).as_slice().unwrap())
    }
}
