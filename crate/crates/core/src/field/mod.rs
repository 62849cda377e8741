//! Velocity fields `v(x, t)` and their conditional flow-matching training.

mod analytic;
pub mod checkpoint;
mod mlp;
mod optim;
pub mod toy;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use analytic::{ConstantField, EpsilonVelocity, GaussianEpsilon, GaussianPathField, LinearField, NoisePredictor};
pub use mlp::{Activation, Mlp, Tape};
pub use optim::{AdamW, AdamWConfig};
pub use toy::{PairSampler, ToyTarget};

use crate::error::{check_dim, Error, Result};
use crate::rng::rng_from_seed;
use crate::schedules::InterpolantSchedule;
use mlp::time_augmented;

pub const MAX_STATE_DIM: usize = 8;
pub const MAX_WIDTH: usize = 64;
pub const MAX_DEPTH: usize = 3;

/// A time-dependent vector field on `R^d` that can also pull a covector
/// back through its state Jacobian.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64>;

    /// `grad_x v(x, t)^T a`, computed exactly.
    fn jvp_state(&self, x: &[f64], t: f64, a: &[f64]) -> Vec<f64>;
}

/// Independent draws `x0 ~ pi_0`, `x1 ~ pi_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointPair {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
}

/// Pathwise velocity `beta_dot x0 + alpha_dot x1` of the reference path.
pub fn conditional_velocity(sched: &InterpolantSchedule, pair: &EndpointPair, t: f64) -> Vec<f64> {
    let (ad, bd) = (sched.alpha_dot(t), sched.beta_dot(t));
    pair.x0.iter().zip(&pair.x1).map(|(a, b)| bd * a + ad * b).collect()
}

/// Point `beta_t x0 + alpha_t x1` on the reference path.
pub fn interpolate(sched: &InterpolantSchedule, pair: &EndpointPair, t: f64) -> Vec<f64> {
    let (al, be) = (sched.alpha(t), sched.beta(t));
    pair.x0.iter().zip(&pair.x1).map(|(a, b)| be * a + al * b).collect()
}

/// Learned velocity `v_theta(x, t)`: an [`Mlp`] from `(x, t)` to `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldNet {
    net: Mlp,
}

pub(crate) fn validate_arch(dim: usize, hidden: &[usize]) -> Result<()> {
    if dim == 0 || dim > MAX_STATE_DIM {
        return Err(Error::Config(format!("state dimension {dim} outside 1..={MAX_STATE_DIM}")));
    }
    if hidden.len() < 2 || hidden.len() > MAX_DEPTH {
        return Err(Error::Config(format!("need 2..={MAX_DEPTH} hidden layers, got {}", hidden.len())));
    }
    if hidden.iter().any(|&w| w == 0 || w > MAX_WIDTH) {
        return Err(Error::Config(format!("hidden widths {hidden:?} outside 1..={MAX_WIDTH}")));
    }
    Ok(())
}

pub(crate) fn arch_widths(dim: usize, hidden: &[usize]) -> Vec<usize> {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(dim + 1);
    widths.extend_from_slice(hidden);
    widths.push(dim);
    widths
}

impl VectorFieldNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        validate_arch(dim, hidden)?;
        Ok(Self { net: Mlp::new(arch_widths(dim, hidden), activation, rng)? })
    }

    pub fn seeded(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        Self::new(dim, hidden, Activation::Tanh, &mut rng_from_seed(seed))
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.input_dim() != net.output_dim() + 1 {
            return Err(Error::DimensionMismatch { expected: net.output_dim() + 1, got: net.input_dim() });
        }
        Ok(Self { net })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// Adds `grad_theta <v(x, t), cot>` into `param_grad`, returns `v(x, t)`.
    pub fn accumulate_param_grad(&self, x: &[f64], t: f64, mut cot: impl FnMut(&[f64]) -> Vec<f64>, param_grad: &mut [f64]) -> Vec<f64> {
        let tape = self.net.forward_tape(&time_augmented(x, t));
        let out = tape.output().to_vec();
        let g = cot(&out);
        self.net.backward(&tape, &g, Some(param_grad));
        out
    }
}

impl VelocityField for VectorFieldNet {
    fn dim(&self) -> usize {
        self.net.output_dim()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.net.forward(&time_augmented(x, t))
    }

    fn jvp_state(&self, x: &[f64], t: f64, a: &[f64]) -> Vec<f64> {
        let tape = self.net.forward_tape(&time_augmented(x, t));
        let mut g = self.net.backward(&tape, a, None);
        g.truncate(x.len());
        g
    }
}

/// Conditional flow-matching loss `mean_i |v(X_t_i, t_i) - u_t_i|^2` over a
/// batch, with its parameter gradient.
pub fn cfm_loss(field: &VectorFieldNet, sched: &InterpolantSchedule, batch: &[EndpointPair], times: &[f64]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty flow-matching batch".into()));
    }
    check_dim(batch.len(), times.len())?;
    let d = field.dim();
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; field.num_params()];
    let mut loss = 0.0;
    for (pair, &t) in batch.iter().zip(times) {
        check_dim(d, pair.x0.len())?;
        check_dim(d, pair.x1.len())?;
        let xt = interpolate(sched, pair, t);
        let target = conditional_velocity(sched, pair, t);
        let mut sq = 0.0;
        field.accumulate_param_grad(
            &xt,
            t,
            |v| {
                v.iter()
                    .zip(&target)
                    .map(|(vi, ui)| {
                        sq += (vi - ui) * (vi - ui);
                        2.0 * scale * (vi - ui)
                    })
                    .collect()
            },
            &mut grad,
        );
        loss += scale * sq;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine_decay: bool,
    pub smoothing_window: usize,
    /// Smoothed loss above which a run is reported as not converged.
    pub loss_threshold: Option<f64>,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 256,
            seed: 0,
            optimizer: AdamWConfig { lr: 3e-3, ..Default::default() },
            cosine_decay: true,
            smoothing_window: 50,
            loss_threshold: None,
            divergence_threshold: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub final_smoothed_loss: f64,
    pub converged: bool,
}

/// Trailing moving average; the first `window - 1` entries average what is available.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Fit `field` to the conditional flow-matching objective.
pub fn train_cfm(
    field: &mut VectorFieldNet,
    sched: &InterpolantSchedule,
    pairs: &dyn PairSampler,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_dim(field.dim(), pairs.dim())?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer, field.num_params());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<EndpointPair> = (0..cfg.batch_size).map(|_| pairs.sample_pair(&mut rng)).collect();
        let times: Vec<f64> = (0..cfg.batch_size).map(|_| rng.random::<f64>()).collect();
        let (loss, grad) = cfm_loss(field, sched, &batch, &times)?;
        if !loss.is_finite() || loss > cfg.divergence_threshold {
            return Err(Error::TrainingDiverged { step, loss });
        }
        if cfg.cosine_decay {
            let progress = step as f64 / cfg.steps as f64;
            opt.set_lr(cfg.optimizer.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        }
        opt.step(field.params_mut(), &grad);
        losses.push(loss);
    }
    let final_smoothed_loss = smooth(&losses, cfg.smoothing_window).last().copied().unwrap_or(f64::NAN);
    let converged = match cfg.loss_threshold {
        Some(th) => final_smoothed_loss < th,
        None => true,
    };
    Ok(TrainReport { losses, final_smoothed_loss, converged })
}
