//! Sinusoidal positional encoding for coordinate inputs.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodingConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl EncodingConfig {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (2 * self.num_frequencies + usize::from(self.include_input))
    }

    /// Per input component x: [x, sin(2^0 pi x), cos(2^0 pi x), ...,
    /// sin(2^{L-1} pi x), cos(2^{L-1} pi x)].
    pub fn encode_into(&self, input: &[f64], out: &mut Vec<f64>) {
        for &x in input {
            if self.include_input {
                out.push(x);
            }
            let mut freq = std::f64::consts::PI;
            for _ in 0..self.num_frequencies {
                let (s, c) = (freq * x).sin_cos();
                out.push(s);
                out.push(c);
                freq *= 2.0;
            }
        }
    }

    pub fn encode(&self, input: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim(input.len()));
        self.encode_into(input, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_when_no_frequencies() {
        let cfg = EncodingConfig { num_frequencies: 0, include_input: true };
        assert_eq!(cfg.encode(&[0.3, -1.2, 4.0]), vec![0.3, -1.2, 4.0]);
    }

    #[test]
    fn zero_input_gives_zero_sin_one_cos() {
        let cfg = EncodingConfig { num_frequencies: 3, include_input: false };
        let e = cfg.encode(&[0.0]);
        assert_eq!(e.len(), 6);
        for pair in e.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn dimension_example() {
        let cfg = EncodingConfig { num_frequencies: 4, include_input: true };
        assert_eq!(cfg.output_dim(3), 27);
        assert_eq!(cfg.encode(&[0.1, 0.2, 0.3]).len(), 27);
    }

    #[test]
    fn frequencies_double() {
        let cfg = EncodingConfig { num_frequencies: 2, include_input: false };
        let x = 0.17;
        let e = cfg.encode(&[x]);
        assert_relative_eq!(e[0], (std::f64::consts::PI * x).sin());
        assert_relative_eq!(e[2], (2.0 * std::f64::consts::PI * x).sin());
    }

    #[test]
    fn bounded_inputs_stay_finite() {
        let cfg = EncodingConfig { num_frequencies: 10, include_input: true };
        for &x in &[-1e3, -1.0, 0.0, 999.9, 1e3] {
            assert!(cfg.encode(&[x]).iter().all(|v| v.is_finite()));
        }
    }
}
