//! Closed-form velocity fields used as oracles and in the examples.

use super::VelocityField;
use crate::schedules::{score_velocity_coeffs, velocity_from_epsilon, InterpolantSchedule};

/// `v(x, t) = c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    pub value: Vec<f64>,
}

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn velocity(&self, _x: &[f64], _t: f64) -> Vec<f64> {
        self.value.clone()
    }

    fn jvp_state(&self, x: &[f64], _t: f64, _a: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }
}

/// `v(x, t) = A x` with `A` row-major `d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField {
    dim: usize,
    matrix: Vec<f64>,
}

impl LinearField {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Self {
        assert_eq!(matrix.len(), dim * dim, "matrix must be d x d");
        Self { dim, matrix }
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], _t: f64) -> Vec<f64> {
        self.matrix.chunks_exact(self.dim).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn jvp_state(&self, _x: &[f64], _t: f64, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (row, ai) in self.matrix.chunks_exact(self.dim).zip(a) {
            for (o, m) in out.iter_mut().zip(row) {
                *o += m * ai;
            }
        }
        out
    }
}

/// Exact marginal velocity of the linear path from `N(0, I)` to
/// `N(mean, std^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPathField {
    pub sched: InterpolantSchedule,
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianPathField {
    fn slope(&self, t: f64) -> f64 {
        let (a, b) = (self.sched.alpha(t), self.sched.beta(t));
        let var = b * b + a * a * self.std * self.std;
        if var == 0.0 {
            return 0.0;
        }
        (self.sched.beta_dot(t) * b + self.sched.alpha_dot(t) * a * self.std * self.std) / var
    }
}

impl VelocityField for GaussianPathField {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        let (a, ad) = (self.sched.alpha(t), self.sched.alpha_dot(t));
        let c = self.slope(t);
        x.iter().zip(&self.mean).map(|(xi, mi)| c * (xi - a * mi) + ad * mi).collect()
    }

    fn jvp_state(&self, _x: &[f64], t: f64, a: &[f64]) -> Vec<f64> {
        let c = self.slope(t);
        a.iter().map(|ai| c * ai).collect()
    }
}

/// Noise-prediction model `eps(x, tau)` in diffusion time `tau = 1 - t`.
pub trait NoisePredictor: Send + Sync {
    fn dim(&self) -> usize;
    fn epsilon(&self, x: &[f64], tau: f64) -> Vec<f64>;
    fn epsilon_vjp(&self, x: &[f64], tau: f64, a: &[f64]) -> Vec<f64>;
}

/// Posterior-mean noise prediction for data `N(mean, std^2 I)` noised along
/// `sched`: `E[eps | x] = beta (x - alpha mean) / (alpha^2 std^2 + beta^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEpsilon {
    pub sched: InterpolantSchedule,
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianEpsilon {
    fn coeffs(&self, tau: f64) -> (f64, f64) {
        let t = 1.0 - tau;
        let (a, b) = (self.sched.alpha(t), self.sched.beta(t));
        let var = a * a * self.std * self.std + b * b;
        (a, b / var)
    }
}

impl NoisePredictor for GaussianEpsilon {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn epsilon(&self, x: &[f64], tau: f64) -> Vec<f64> {
        let (a, c) = self.coeffs(tau);
        x.iter().zip(&self.mean).map(|(xi, mi)| c * (xi - a * mi)).collect()
    }

    fn epsilon_vjp(&self, _x: &[f64], tau: f64, a: &[f64]) -> Vec<f64> {
        let (_, c) = self.coeffs(tau);
        a.iter().map(|ai| c * ai).collect()
    }
}

/// FM velocity induced by a noise-prediction model.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonVelocity<P> {
    pub sched: InterpolantSchedule,
    pub predictor: P,
}

impl<P: NoisePredictor> VelocityField for EpsilonVelocity<P> {
    fn dim(&self) -> usize {
        self.predictor.dim()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        if self.sched.beta(t) == 0.0 {
            let kappa = self.sched.alpha_dot(t) / self.sched.alpha(t);
            return x.iter().map(|xi| kappa * xi).collect();
        }
        let eps = self.predictor.epsilon(x, 1.0 - t);
        velocity_from_epsilon(&self.sched, &eps, x, t).unwrap_or_else(|_| vec![f64::NAN; x.len()])
    }

    fn jvp_state(&self, x: &[f64], t: f64, a: &[f64]) -> Vec<f64> {
        let Ok((kappa, eta)) = score_velocity_coeffs(&self.sched, t) else {
            return vec![f64::NAN; x.len()];
        };
        let beta = self.sched.beta(t);
        if beta == 0.0 {
            return a.iter().map(|ai| kappa * ai).collect();
        }
        let e = self.predictor.epsilon_vjp(x, 1.0 - t, a);
        a.iter().zip(&e).map(|(ai, ei)| kappa * ai - eta * ei / beta).collect()
    }
}
