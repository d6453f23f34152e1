//! A small fully-connected network with cached forward passes and exact
//! reverse-mode gradients, plus flat parameter access for the optimizer and
//! checkpointing.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_chacha::rand_core::RngCore;

use crate::error::{DdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => crate::math::softplus(x),
        }
    }

    /// Derivative as a function of the pre-activation value.
    fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => crate::math::sigmoid(x),
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Softplus => 2,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Softplus),
            _ => Err(DdError::Format(format!("unknown activation tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    // weight is (in, out) so a batch row-vector multiplies from the left
    weight: Array2<f64>,
    bias: Array1<f64>,
}

/// Multi-layer perceptron; hidden layers share one activation, the final
/// layer is linear (head nonlinearities are applied by the caller).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
}

/// Cached intermediate values from a forward pass, consumed by `backward`.
pub struct ForwardCache {
    // inputs[i] is the (post-activation) input to layer i; inputs[0] is x
    inputs: Vec<Array2<f64>>,
    // pre-activation outputs of every hidden layer
    preacts: Vec<Array2<f64>>,
}

/// Parameter gradients in the same flat layout as `write_params`.
pub struct MlpGrads {
    pub flat: Vec<f64>,
}

/// Uniform draw in (-1, 1) from raw 64-bit output.
fn uniform_sym(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

impl Mlp {
    /// `dims` lists layer widths from input to output, e.g. [27, 64, 64, 6].
    /// Weights start uniform in +/- sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn new(dims: &[usize], activation: Activation, rng: &mut impl RngCore) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(DdError::InvalidInput("mlp needs at least two non-zero dims".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_in, fan_out), |_| scale * uniform_sym(rng));
                Dense { weight, bias: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.iter().map(|l| l.weight.nrows()).collect();
        d.push(self.layers.last().unwrap().weight.ncols());
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Batched forward pass; rows of `x` are independent queries.
    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, ForwardCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.to_owned();
        for (li, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if li + 1 < self.layers.len() {
                let a = z.mapv(|v| self.activation.apply(v));
                preacts.push(z);
                h = a;
            } else {
                h = z;
            }
        }
        (h, ForwardCache { inputs, preacts })
    }

    /// Reverse-mode gradients for a recorded forward pass. `grad_out` must
    /// match the forward batch. Returns parameter gradients and the gradient
    /// with respect to the input rows.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> (MlpGrads, Array2<f64>) {
        let mut flat = vec![0.0; self.param_count()];
        let mut grad = grad_out.to_owned();
        // walk layers in reverse, slicing the flat gradient buffer per layer
        let offsets = self.layer_offsets();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.inputs[li];
            let (w_off, b_off) = offsets[li];
            // dW = input^T grad ; db = column sums of grad
            let dw = input.t().dot(&grad);
            let (rows, cols) = (dw.nrows(), dw.ncols());
            for r in 0..rows {
                for c in 0..cols {
                    flat[w_off + r * cols + c] = dw[(r, c)];
                }
            }
            let db = grad.sum_axis(Axis(0));
            flat[b_off..b_off + db.len()].copy_from_slice(db.as_slice().unwrap());
            grad = grad.dot(&layer.weight.t());
            if li > 0 {
                let pre = &cache.preacts[li - 1];
                grad.zip_mut_with(pre, |g, &z| *g *= self.activation.deriv(z));
            }
        }
        (MlpGrads { flat }, grad)
    }

    /// Parameter gradients of the final layer only, returned in the same
    /// flat layout as `backward` (earlier layers zero). Nothing propagates
    /// to the trunk: use this for loss terms that should train only the
    /// output heads.
    pub fn backward_last_layer(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> MlpGrads {
        let mut flat = vec![0.0; self.param_count()];
        let li = self.layers.len() - 1;
        let input = &cache.inputs[li];
        let (w_off, b_off) = self.layer_offsets()[li];
        let dw = input.t().dot(&grad_out);
        let (rows, cols) = (dw.nrows(), dw.ncols());
        for r in 0..rows {
            for c in 0..cols {
                flat[w_off + r * cols + c] = dw[(r, c)];
            }
        }
        let db = grad_out.sum_axis(Axis(0));
        flat[b_off..b_off + db.len()].copy_from_slice(db.as_slice().unwrap());
        MlpGrads { flat }
    }

    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            let w_off = off;
            off += layer.weight.len();
            let b_off = off;
            off += layer.bias.len();
            offsets.push((w_off, b_off));
        }
        offsets
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn write_params(&self, out: &mut [f64]) {
        let mut off = 0;
        for layer in &self.layers {
            let w = layer.weight.as_slice().unwrap();
            out[off..off + w.len()].copy_from_slice(w);
            off += w.len();
            let b = layer.bias.as_slice().unwrap();
            out[off..off + b.len()].copy_from_slice(b);
            off += b.len();
        }
    }

    pub fn read_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(DdError::DimensionMismatch(format!(
                "{} params for network of size {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let len = layer.weight.len();
            layer
                .weight
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&params[off..off + len]);
            off += len;
            let len = layer.bias.len();
            layer
                .bias
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&params[off..off + len]);
            off += len;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_grad_gives_zero_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[3, 8, 2], Activation::Tanh, &mut rng).unwrap();
        let x = arr2(&[[0.1, -0.2, 0.4]]);
        let (_, cache) = mlp.forward(x.view());
        let (grads, gx) = mlp.backward(&cache, arr2(&[[0.0, 0.0]]).view());
        assert!(grads.flat.iter().all(|&g| g == 0.0));
        assert!(gx.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_linear_layer_outer_product_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(&[2, 3], Activation::Relu, &mut rng).unwrap();
        let x = arr2(&[[0.5, -1.5]]);
        let g = arr2(&[[1.0, 2.0, -1.0]]);
        let (_, cache) = mlp.forward(x.view());
        let (grads, _) = mlp.backward(&cache, g.view());
        // dW[r][c] = x[r] * g[c], db = g
        let expect = [
            0.5, 1.0, -0.5, // row 0
            -1.5, -3.0, 1.5, // row 1
            1.0, 2.0, -1.0, // bias
        ];
        for (got, want) in grads.flat.iter().zip(expect) {
            assert_relative_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn params_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[4, 6, 5], Activation::Softplus, &mut rng).unwrap();
        let mut buf = vec![0.0; mlp.param_count()];
        mlp.write_params(&mut buf);
        let mut other = Mlp::new(&[4, 6, 5], Activation::Softplus, &mut rng).unwrap();
        other.read_params(&buf).unwrap();
        assert_eq!(mlp, other);
        assert!(other.read_params(&buf[1..]).is_err());
    }

    /// Central finite differences against the analytic gradients.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let act = match trial % 2 {
                0 => Activation::Tanh,
                _ => Activation::Softplus,
            };
            let mut mlp = Mlp::new(&[3, 10, 8, 4], act, &mut rng).unwrap();
            let x = arr2(&[[
                uniform_sym(&mut rng),
                uniform_sym(&mut rng),
                uniform_sym(&mut rng),
            ]]);
            // scalar loss: sum of squared outputs
            let (out, cache) = mlp.forward(x.view());
            let grad_out = out.mapv(|v| 2.0 * v);
            let (grads, _) = mlp.backward(&cache, grad_out.view());

            let mut params = vec![0.0; mlp.param_count()];
            mlp.write_params(&mut params);
            let h = 1e-5;
            for pi in (0..params.len()).step_by(7) {
                let orig = params[pi];
                params[pi] = orig + h;
                mlp.read_params(&params).unwrap();
                let (lo, _) = mlp.forward(x.view());
                let f_plus: f64 = lo.iter().map(|v| v * v).sum();
                params[pi] = orig - h;
                mlp.read_params(&params).unwrap();
                let (lo, _) = mlp.forward(x.view());
                let f_minus: f64 = lo.iter().map(|v| v * v).sum();
                params[pi] = orig;
                mlp.read_params(&params).unwrap();
                let fd = (f_plus - f_minus) / (2.0 * h);
                let denom = fd.abs().max(grads.flat[pi].abs()).max(1e-4);
                assert!(
                    (fd - grads.flat[pi]).abs() / denom < 1e-4,
                    "param {pi}: analytic {} vs fd {fd}",
                    grads.flat[pi]
                );
            }
        }
    }
}
