//! Small fully connected network over `(x, t)` with hand-written reverse
//! accumulation for both the parameter gradient and the input gradient.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Makes the whole network linear; used to check Jacobians by hand.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn slope_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        }
    }
}

/// Layer widths `[d + 1, h_1, ..., h_L, d]` and a flat parameter vector.
///
/// Each layer stores its weight matrix row-major (`out x in`) followed by its
/// bias. Hidden layers apply the activation; the output layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
}

/// Per-layer outputs of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `layers[0]` is the input, `layers[l]` the output of layer `l`.
    layers: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("tape always holds the input")
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Random init with weights `N(0, 1/fan_in)` and zero biases.
    pub fn new<R: Rng + ?Sized>(widths: Vec<usize>, activation: Activation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let mut params = Vec::with_capacity(param_count(&widths));
        for w in widths.windows(2) {
            let scale = (1.0 / w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Self { widths, params, activation })
    }

    pub fn from_params(widths: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let expected = param_count(&widths);
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: params.len() });
        }
        Ok(Self { widths, params, activation })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Zero the output layer so the network starts as the zero map.
    pub fn zero_output_layer(&mut self) {
        let n = self.widths.len();
        let last = self.widths[n - 2] * self.widths[n - 1] + self.widths[n - 1];
        let len = self.params.len();
        self.params[len - last..].fill(0.0);
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        let mut offset = 0;
        let last = self.widths.len() - 2;
        for (l, w) in self.widths.windows(2).enumerate() {
            cur = self.layer(&cur, w[0], w[1], &mut offset, l < last);
        }
        cur
    }

    pub fn forward_tape(&self, input: &[f64]) -> Tape {
        let mut layers = Vec::with_capacity(self.widths.len());
        layers.push(input.to_vec());
        let mut offset = 0;
        let last = self.widths.len() - 2;
        for (l, w) in self.widths.windows(2).enumerate() {
            let out = self.layer(&layers[l], w[0], w[1], &mut offset, l < last);
            layers.push(out);
        }
        Tape { layers }
    }

    fn layer(&self, input: &[f64], n_in: usize, n_out: usize, offset: &mut usize, hidden: bool) -> Vec<f64> {
        let weights = &self.params[*offset..*offset + n_in * n_out];
        let bias = &self.params[*offset + n_in * n_out..*offset + n_in * n_out + n_out];
        *offset += n_in * n_out + n_out;
        weights
            .chunks_exact(n_in)
            .zip(bias)
            .map(|(row, b)| {
                let z = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
                if hidden {
                    self.activation.apply(z)
                } else {
                    z
                }
            })
            .collect()
    }

    /// Reverse pass for the cotangent `grad_out` of the output.
    ///
    /// Adds the parameter gradient into `param_grad` when given and returns
    /// the gradient with respect to the network input.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let n_layers = self.widths.len() - 1;
        let mut offset = self.params.len();
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            offset -= n_in * n_out + n_out;
            if l < n_layers - 1 {
                for (d, h) in delta.iter_mut().zip(&tape.layers[l + 1]) {
                    *d *= self.activation.slope_from_output(*h);
                }
            }
            let input = &tape.layers[l];
            if let Some(g) = param_grad.as_deref_mut() {
                let (gw, gb) = g[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for ((row, gbi), d) in gw.chunks_exact_mut(n_in).zip(gb.iter_mut()).zip(&delta) {
                    *gbi += d;
                    for (gij, xj) in row.iter_mut().zip(input) {
                        *gij += d * xj;
                    }
                }
            }
            let weights = &self.params[offset..offset + n_in * n_out];
            let mut next = vec![0.0; n_in];
            for (row, d) in weights.chunks_exact(n_in).zip(&delta) {
                for (nj, wj) in next.iter_mut().zip(row) {
                    *nj += d * wj;
                }
            }
            delta = next;
        }
        delta
    }
}

/// Network input `(x, t)`: the raw time is appended to the state.
pub(crate) fn time_augmented(x: &[f64], t: f64) -> Vec<f64> {
    let mut input = Vec::with_capacity(x.len() + 1);
    input.extend_from_slice(x);
    input.push(t);
    input
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn zeroed_output_layer_gives_exact_zero() {
        let mut rng = rng_from_seed(3);
        let mut net = Mlp::new(vec![3, 8, 8, 2], Activation::Tanh, &mut rng).unwrap();
        net.zero_output_layer();
        assert_eq!(net.forward(&[0.3, -2.0, 0.5]), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_input_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(5);
        let net = Mlp::new(vec![3, 8, 8, 2], Activation::Tanh, &mut rng).unwrap();
        let input = [0.4, -0.7, 0.2];
        let cot = [0.9, -1.3];
        let tape = net.forward_tape(&input);
        let g = net.backward(&tape, &cot, None);
        let h = 1e-6;
        for j in 0..3 {
            let mut p = input;
            let mut m = input;
            p[j] += h;
            m[j] -= h;
            let fp: f64 = net.forward(&p).iter().zip(&cot).map(|(a, b)| a * b).sum();
            let fm: f64 = net.forward(&m).iter().zip(&cot).map(|(a, b)| a * b).sum();
            assert!((g[j] - (fp - fm) / (2.0 * h)).abs() < 1e-7);
        }
    }

    #[test]
    fn from_params_checks_length() {
        assert!(Mlp::from_params(vec![3, 4, 2], Activation::Tanh, vec![0.0; 5]).is_err());
        assert!(Mlp::from_params(vec![3, 4, 2], Activation::Tanh, vec![0.0; 26]).is_ok());
    }
}
