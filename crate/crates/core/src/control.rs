//! The instantaneous control law and Adjoint-Matching fine-tuning.

use std::collections::BTreeSet;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::costs::{RunningCost, StateCost, TimeWeight};
use crate::error::{check_dim, Error, Result};
use crate::field::checkpoint::params_checksum;
use crate::field::{arch_widths, smooth, validate_arch, Activation, AdamW, AdamWConfig, Mlp, VectorFieldNet, VelocityField};
use crate::linalg::{all_finite, norm_sq};
use crate::rng::{gaussian_vec, rng_from_seed, stream_rng};
use crate::sampler::{integrate, Noise, SampleMode, SamplerConfig, Trajectory};
use crate::schedules::{drift_coeffs, DiffusionSchedule, InterpolantSchedule};

/// `u = -sigma_t (1 - t) grad_f`. Pass `sigma_t = 1` for the ODE variant.
pub fn instantaneous_control(sigma_t: f64, t: f64, grad_f: &[f64]) -> Vec<f64> {
    let w = sigma_t * (1.0 - t);
    grad_f.iter().map(|g| -w * g).collect()
}

/// Lean adjoint `a~(t_i)` on a trajectory grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub times: Vec<f64>,
    /// One value per grid point, forward time order.
    pub values: Vec<Vec<f64>>,
    pub terminal: Vec<f64>,
}

/// Backward Euler sweep on the frozen trajectory:
/// `a_i = a_{i+1} + dt_i [grad_x b(X_i, t_i)^T a_{i+1} + grad_x f(X_i, t_i)]`,
/// `a_N = grad g(X_N)`.
///
/// `b = (1 + c) v - c kappa x` is the base drift under `diff`, so its
/// Jacobian transpose is `(1 + c) grad_x v^T - c kappa I`. This is the exact
/// reverse-mode derivative of the discrete forward map.
pub fn lean_adjoint_backward(
    field: &dyn VelocityField,
    sched: &InterpolantSchedule,
    diff: &DiffusionSchedule,
    traj: &Trajectory,
    running: Option<&RunningCost<'_>>,
    terminal: Option<&dyn StateCost>,
) -> Result<AdjointState> {
    let n_pts = traj.times.len();
    if n_pts < 2 || traj.states.len() != n_pts {
        return Err(Error::GridMismatch(format!("{} times for {} states", n_pts, traj.states.len())));
    }
    let d = traj.dim();
    check_dim(field.dim(), d)?;
    let last = traj.endpoint();
    let a_n = match terminal {
        Some(g) => g.grad(last)?,
        None => vec![0.0; d],
    };
    let mut values = vec![Vec::new(); n_pts];
    values[n_pts - 1] = a_n.clone();
    let mut a = a_n.clone();
    for i in (0..n_pts - 1).rev() {
        let (t, dt) = (traj.times[i], traj.times[i + 1] - traj.times[i]);
        let x = &traj.states[i];
        let (c, kappa) = drift_coeffs(sched, diff, t)?;
        let jv = field.jvp_state(x, t, &a);
        let mut next: Vec<f64> = (0..d).map(|k| a[k] + dt * ((1.0 + c) * jv[k] - c * kappa * a[k])).collect();
        if let Some(rc) = running {
            if let Some(gf) = rc.grad(sched, x, t)? {
                for (nk, gk) in next.iter_mut().zip(&gf) {
                    *nk += dt * gk;
                }
            }
        }
        if !all_finite(&next) {
            return Err(Error::Numerical(format!("non-finite adjoint at t = {t}")));
        }
        a = next;
        values[i] = a.clone();
    }
    Ok(AdjointState { times: traj.times.clone(), values, terminal: a_n })
}

/// Additive control `u_theta(x, t)`, same family as the velocity network.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlNet {
    net: VectorFieldNet,
}

impl ControlNet {
    /// Fresh network whose output layer is zero, so `u_theta = 0` initially.
    pub fn seeded(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        validate_arch(dim, hidden)?;
        let mut net = Mlp::new(arch_widths(dim, hidden), Activation::Tanh, &mut rng_from_seed(seed))?;
        net.zero_output_layer();
        Ok(Self { net: VectorFieldNet::from_mlp(net)? })
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        Ok(Self { net: VectorFieldNet::from_mlp(net)? })
    }

    pub fn mlp(&self) -> &Mlp {
        self.net.mlp()
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

    pub fn dim(&self) -> usize {
        self.net.dim()
    }

    pub fn control(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.net.velocity(x, t)
    }
}

/// Adjoint-Matching loss `mean_i 1/2 |u(X_i, t_i) + sigma(t_i) a~(t_i)|^2`
/// over the subsampled grid indices, with its parameter gradient. The target
/// is a constant.
pub fn am_loss(
    control: &ControlNet,
    sched: &InterpolantSchedule,
    diff: &DiffusionSchedule,
    traj: &Trajectory,
    adj: &AdjointState,
    subsample: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if subsample.is_empty() {
        return Err(Error::Config("empty subsample".into()));
    }
    if adj.times != traj.times {
        return Err(Error::GridMismatch("adjoint and trajectory grids differ".into()));
    }
    let scale = 1.0 / subsample.len() as f64;
    let mut grad = vec![0.0; control.num_params()];
    let mut loss = 0.0;
    for &i in subsample {
        if i >= traj.times.len() {
            return Err(Error::GridMismatch(format!("index {i} outside a grid of {}", traj.times.len())));
        }
        let t = traj.times[i];
        let sigma = diff.sigma(sched, t)?;
        let target: Vec<f64> = adj.values[i].iter().map(|a| -sigma * a).collect();
        let mut sq = 0.0;
        control.net.accumulate_param_grad(
            &traj.states[i],
            t,
            |u| {
                u.iter()
                    .zip(&target)
                    .map(|(ui, ti)| {
                        sq += (ui - ti) * (ui - ti);
                        scale * (ui - ti)
                    })
                    .collect()
            },
            &mut grad,
        );
        loss += 0.5 * scale * sq;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AMConfig {
    pub lambda: f64,
    /// Optimizer iterations.
    pub steps_total: usize,
    pub batch_trajectories: usize,
    pub subsample_steps: usize,
    /// Sampler grid steps.
    pub grid_steps: usize,
    pub t_start: f64,
    pub hidden: Vec<usize>,
    pub optimizer: AdamWConfig,
    pub time_weight: TimeWeight,
    /// Leave the first grid step out of the regression. Its target is
    /// dominated by the stiff `-kappa x` term of the first Euler step.
    pub skip_first_step: bool,
    pub checkpoint_every: usize,
    pub smoothing_window: usize,
    pub divergence_threshold: f64,
}

impl Default for AMConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            steps_total: 400,
            batch_trajectories: 5,
            subsample_steps: 16,
            grid_steps: crate::sampler::DEFAULT_STEPS,
            t_start: crate::sampler::DEFAULT_T_START,
            hidden: vec![16, 16],
            optimizer: AdamWConfig { lr: 3e-3, ..Default::default() },
            time_weight: TimeWeight::Unit,
            skip_first_step: false,
            checkpoint_every: 0,
            smoothing_window: 20,
            divergence_threshold: 1e8,
        }
    }
}

impl AMConfig {
    fn sampler(&self) -> SamplerConfig {
        SamplerConfig { t_start: self.t_start, ..SamplerConfig::memoryless(self.grid_steps) }
    }

    fn validate(&self) -> Result<()> {
        self.sampler().validate()?;
        let candidates = self.grid_steps - self.skip_first_step as usize;
        if self.subsample_steps == 0 || self.subsample_steps > candidates {
            return Err(Error::Config(format!("subsample_steps = {} must lie in 1..={candidates}", self.subsample_steps)));
        }
        if self.batch_trajectories == 0 {
            return Err(Error::Config("batch_trajectories must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AMReport {
    pub losses: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub base_checksum: String,
}

/// Fine-tune an additive control for `lambda H` with Adjoint Matching.
pub fn finetune_adjoint_matching(
    field: &VectorFieldNet,
    sched: &InterpolantSchedule,
    cost: &dyn StateCost,
    cfg: &AMConfig,
    seed: u64,
) -> Result<(ControlNet, AMReport)> {
    finetune_adjoint_matching_with(field, sched, cost, cfg, seed, &mut |_, _| Ok(()))
}

/// As [`finetune_adjoint_matching`], calling `on_checkpoint(iteration, net)`
/// every `cfg.checkpoint_every` iterations.
pub fn finetune_adjoint_matching_with(
    field: &VectorFieldNet,
    sched: &InterpolantSchedule,
    cost: &dyn StateCost,
    cfg: &AMConfig,
    seed: u64,
    on_checkpoint: &mut dyn FnMut(usize, &ControlNet) -> Result<()>,
) -> Result<(ControlNet, AMReport)> {
    cfg.validate()?;
    let d = field.dim();
    check_dim(d, cost.dim())?;
    let base_checksum = params_checksum(field.params());
    let diff = DiffusionSchedule::Memoryless;
    let sampler = cfg.sampler();
    let running = RunningCost::new(cost, cfg.lambda, cfg.time_weight);
    let mut control = ControlNet::seeded(d, &cfg.hidden, seed ^ 0xC0_17_40_11)?;
    let mut opt = AdamW::new(cfg.optimizer, control.num_params());
    let mut pick = rng_from_seed(seed ^ 0x5AB5);
    let first = cfg.skip_first_step as usize;
    let mut losses = Vec::with_capacity(cfg.steps_total);
    for it in 0..cfg.steps_total {
        let mut grad = vec![0.0; control.num_params()];
        let mut loss = 0.0;
        let picked: BTreeSet<usize> =
            sample_indices(&mut pick, cfg.grid_steps - first, cfg.subsample_steps).into_iter().map(|i| i + first).collect();
        let subsample: Vec<usize> = picked.into_iter().collect();
        let inv_b = 1.0 / cfg.batch_trajectories as f64;
        for b in 0..cfg.batch_trajectories {
            let stream = (it * cfg.batch_trajectories + b) as u64;
            let mut rng = stream_rng(seed, stream);
            let x0 = gaussian_vec(&mut rng, d);
            let noise_seed: u64 = rng.random();
            let traj = controlled_memoryless_sde(field, &control, sched, &sampler, &x0, noise_seed)?;
            let adj = lean_adjoint_backward(field, sched, &diff, &traj, Some(&running), None)?;
            let (l, g) = am_loss(&control, sched, &diff, &traj, &adj, &subsample)?;
            loss += inv_b * l;
            crate::linalg::axpy(inv_b, &g, &mut grad);
        }
        if !loss.is_finite() || loss > cfg.divergence_threshold {
            return Err(Error::TrainingDiverged { step: it, loss });
        }
        opt.step(control.params_mut(), &grad);
        losses.push(loss);
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(it + 1, &control)?;
        }
    }
    if params_checksum(field.params()) != base_checksum {
        return Err(Error::Integrity("base field parameters changed during fine-tuning".into()));
    }
    let smoothed = smooth(&losses, cfg.smoothing_window);
    Ok((control, AMReport { losses, smoothed, base_checksum }))
}

fn control_shift(control: &ControlNet, sched: &InterpolantSchedule, x: &[f64], t: f64) -> Result<Option<Vec<f64>>> {
    let u = control.control(x, t);
    if u.iter().all(|v| *v == 0.0) {
        return Ok(None);
    }
    let half_sigma = 0.5 * crate::schedules::sigma_mem(sched, t)?;
    Ok(Some(u.iter().map(|v| half_sigma * v).collect()))
}

/// Memoryless SDE with drift `b + sigma_mem u_theta`.
pub fn controlled_memoryless_sde(
    field: &dyn VelocityField,
    control: &ControlNet,
    sched: &InterpolantSchedule,
    cfg: &SamplerConfig,
    x0: &[f64],
    seed: u64,
) -> Result<Trajectory> {
    if cfg.mode != SampleMode::Sde || cfg.diffusion != DiffusionSchedule::Memoryless {
        return Err(Error::Config("controlled training trajectories need the memoryless SDE".into()));
    }
    integrate(field, sched, cfg, x0, Noise::Seed(seed), &mut |x, t| control_shift(control, sched, x, t))
}

/// ODE sampling with velocity `v + 1/2 sigma_mem(t) u_theta(x, t)`.
pub fn apply_control_inference(
    field: &dyn VelocityField,
    control: &ControlNet,
    sched: &InterpolantSchedule,
    cfg: &SamplerConfig,
    x0: &[f64],
) -> Result<Trajectory> {
    if cfg.mode != SampleMode::Ode {
        return Err(Error::Config("controlled inference runs the ODE sampler".into()));
    }
    check_dim(field.dim(), control.dim())?;
    let mut traj = integrate(field, sched, cfg, x0, Noise::Seed(0), &mut |x, t| control_shift(control, sched, x, t))?;
    traj.seed = None;
    Ok(traj)
}

/// Mean of `|u_theta|^2` over a set of probe points.
pub fn mean_control_energy(control: &ControlNet, probes: &[(Vec<f64>, f64)]) -> f64 {
    probes.iter().map(|(x, t)| norm_sq(&control.control(x, *t))).sum::<f64>() / probes.len().max(1) as f64
}
