//! Toy endpoint distributions. The source `pi_0` is always `N(0, I)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::EndpointPair;
use crate::rng::gaussian_vec;

/// Target distribution `pi_1` for training a base field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ToyTarget {
    /// Point mass at `mean`.
    Point { mean: Vec<f64> },
    /// `N(mean, std^2 I)`.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Equal-weight isotropic mixture.
    Mixture { means: Vec<Vec<f64>>, std: f64 },
}

impl ToyTarget {
    pub fn dim(&self) -> usize {
        match self {
            ToyTarget::Point { mean } | ToyTarget::Gaussian { mean, .. } => mean.len(),
            ToyTarget::Mixture { means, .. } => means.first().map_or(0, Vec::len),
        }
    }

    /// Four modes on the diagonals, the mixture used by the standard toy scene.
    pub fn four_mode_mixture() -> Self {
        let r = 1.2;
        ToyTarget::Mixture { means: vec![vec![r, r], vec![-r, r], vec![-r, -r], vec![r, -r]], std: 0.35 }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            ToyTarget::Point { mean } => mean.clone(),
            ToyTarget::Gaussian { mean, std } => mean.iter().map(|m| m + std * rng.sample::<f64, _>(StandardNormal)).collect(),
            ToyTarget::Mixture { means, std } => {
                let k = rng.random_range(0..means.len());
                means[k].iter().map(|m| m + std * rng.sample::<f64, _>(StandardNormal)).collect()
            }
        }
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Source of independent `(x0, x1)` couplings for flow-matching regression.
pub trait PairSampler {
    fn dim(&self) -> usize;
    fn sample_pair(&self, rng: &mut dyn rand::RngCore) -> EndpointPair;
}

impl PairSampler for ToyTarget {
    fn dim(&self) -> usize {
        ToyTarget::dim(self)
    }

    fn sample_pair(&self, rng: &mut dyn rand::RngCore) -> EndpointPair {
        let x0 = gaussian_vec(rng, self.dim());
        let x1 = self.sample(rng);
        EndpointPair { x0, x1 }
    }
}
