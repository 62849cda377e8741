//! Interpolant schedulers, diffusion coefficients and the conversions
//! between velocity, drift, score and noise prediction.
//!
//! A schedule is the pair `(alpha_t, beta_t)` of the linear reference path
//! `X_t = beta_t X_0 + alpha_t X_1`, running from noise at `t = 0` to data at
//! `t = 1`. Rectified flow uses the closed form `alpha_t = t`; the VP-induced
//! schedule is evaluated from a discrete noising chain.

use crate::error::{Error, Result};

/// Largest terminal `alpha_bar(1)` a VP chain may leave behind before the
/// converted schedule is rejected. The FM path would start visibly away
/// from pure noise above this.
pub const MAX_TERMINAL_ALPHA_BAR: f64 = 1e-2;

/// The scheduler pair `(alpha_t, beta_t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum InterpolantSchedule {
    /// `alpha_t = t`, `beta_t = 1 - t`.
    RectifiedFlow,
    /// `alpha_t = sqrt(abar(1 - t))`, `beta_t = sqrt(1 - abar(1 - t))`.
    VpInduced(VpRateTable),
}

impl InterpolantSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            Self::RectifiedFlow => t,
            Self::VpInduced(table) => (0.5 * table.log_alpha_bar(1.0 - t)).exp(),
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        match self {
            Self::RectifiedFlow => 1.0 - t,
            Self::VpInduced(table) => (-table.log_alpha_bar(1.0 - t).exp_m1()).max(0.0).sqrt(),
        }
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        match self {
            Self::RectifiedFlow => 1.0,
            Self::VpInduced(table) => 0.5 * table.rate(1.0 - t) * self.alpha(t),
        }
    }

    /// Diverges at `t = 1` for VP-induced schedules (`beta_1 = 0`).
    pub fn beta_dot(&self, t: f64) -> f64 {
        match self {
            Self::RectifiedFlow => -1.0,
            Self::VpInduced(table) => {
                let tau = 1.0 - t;
                let abar = table.log_alpha_bar(tau).exp();
                -abar * table.rate(tau) / (2.0 * self.beta(t))
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::RectifiedFlow => "rectified_flow",
            Self::VpInduced(_) => "vp",
        }
    }
}

/// A `K`-step variance-preserving noising chain `beta_1..beta_K` together
/// with its continuous-time lift on the grid `tau_k = k / K`.
///
/// `log abar` is interpolated with a monotone cubic Hermite spline through
/// the exact cumulative products, so `abar(tau_k) = prod_{i<=k} (1 - beta_i)`
/// holds at every grid point and the rate `beta(tau) = -d log abar / d tau`
/// is continuous and nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct VpRateTable {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    log_alpha_bar: Vec<f64>,
    slopes: Vec<f64>,
}

impl VpRateTable {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("VP table needs at least one step".into()));
        }
        if let Some((k, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta_{} = {b} is outside (0, 1)", k + 1)));
        }
        let k = betas.len();
        let mut log_alpha_bar = Vec::with_capacity(k + 1);
        let mut alpha_bar = Vec::with_capacity(k + 1);
        log_alpha_bar.push(0.0);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        let mut log_sum = 0.0;
        for b in &betas {
            prod *= 1.0 - b;
            log_sum += (-b).ln_1p();
            alpha_bar.push(prod);
            log_alpha_bar.push(log_sum);
        }
        let slopes = pchip_slopes(&log_alpha_bar, 1.0 / k as f64);
        Ok(Self { betas, alpha_bar, log_alpha_bar, slopes })
    }

    /// `beta_k` linear from `beta_min` to `beta_max` over `k` steps.
    pub fn linear(k: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Schedule("VP table needs at least one step".into()));
        }
        let betas = (0..k).map(|i| if k == 1 { beta_min } else { beta_min + (beta_max - beta_min) * i as f64 / (k - 1) as f64 }).collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative products `abar_0 = 1, abar_1, ..., abar_K`.
    pub fn alpha_bar_grid(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn terminal_alpha_bar(&self) -> f64 {
        self.alpha_bar[self.steps()]
    }

    fn locate(&self, tau: f64) -> (usize, f64) {
        let k = self.steps();
        let pos = (tau.clamp(0.0, 1.0) * k as f64).min(k as f64);
        let cell = (pos.floor() as usize).min(k - 1);
        (cell, pos - cell as f64)
    }

    pub fn log_alpha_bar(&self, tau: f64) -> f64 {
        let (c, s) = self.locate(tau);
        let h = 1.0 / self.steps() as f64;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.log_alpha_bar[c] + h10 * h * self.slopes[c] + h01 * self.log_alpha_bar[c + 1] + h11 * h * self.slopes[c + 1]
    }

    pub fn alpha_bar(&self, tau: f64) -> f64 {
        self.log_alpha_bar(tau).exp()
    }

    /// Continuous noising rate `beta(tau) >= 0`.
    pub fn rate(&self, tau: f64) -> f64 {
        let (c, s) = self.locate(tau);
        let h = 1.0 / self.steps() as f64;
        let s2 = s * s;
        let d00 = 6.0 * s2 - 6.0 * s;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = -6.0 * s2 + 6.0 * s;
        let d11 = 3.0 * s2 - 2.0 * s;
        let dlog = (d00 * self.log_alpha_bar[c] + d01 * self.log_alpha_bar[c + 1]) / h + d10 * self.slopes[c] + d11 * self.slopes[c + 1];
        (-dlog).max(0.0)
    }
}

/// Fritsch-Carlson node slopes on a uniform grid.
fn pchip_slopes(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let secants: Vec<f64> = y.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    let mut m = vec![0.0; n];
    m[0] = secants[0];
    m[n - 1] = secants[n - 2];
    for i in 1..n - 1 {
        let (a, b) = (secants[i - 1], secants[i]);
        m[i] = if a * b <= 0.0 { 0.0 } else { 2.0 / (1.0 / a + 1.0 / b) };
    }
    m
}

/// Diffusion coefficient `sigma(t)` of the stochastic sampler.
#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionSchedule {
    /// Deterministic sampling.
    Zero,
    /// `sigma_mem` of the interpolant schedule.
    Memoryless,
    /// Piecewise-linear `(t, sigma)` knots, held constant outside the range.
    Custom(Vec<(f64, f64)>),
}

impl DiffusionSchedule {
    pub fn custom(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Schedule("custom diffusion needs at least one knot".into()));
        }
        if knots.iter().any(|(_, s)| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Schedule("custom diffusion values must be finite and >= 0".into()));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Schedule("custom diffusion knots must be strictly increasing in t".into()));
        }
        Ok(Self::Custom(knots))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Zero)
    }

    pub fn sigma(&self, sched: &InterpolantSchedule, t: f64) -> Result<f64> {
        match self {
            Self::Zero => Ok(0.0),
            Self::Memoryless => sigma_mem(sched, t),
            Self::Custom(knots) => Ok(interp_knots(knots, t)),
        }
    }
}

fn interp_knots(knots: &[(f64, f64)], t: f64) -> f64 {
    let first = knots[0];
    let last = knots[knots.len() - 1];
    if t <= first.0 {
        return first.1;
    }
    if t >= last.0 {
        return last.1;
    }
    let i = knots.partition_point(|(k, _)| *k <= t);
    let (t0, s0) = knots[i - 1];
    let (t1, s1) = knots[i];
    s0 + (s1 - s0) * (t - t0) / (t1 - t0)
}

/// `kappa_t = alpha_dot / alpha` and `eta_t = beta (kappa beta - beta_dot)`.
///
/// These are the coefficients of the affine map between score and velocity,
/// `s(x, t) = (v(x, t) - kappa_t x) / eta_t`.
pub fn score_velocity_coeffs(sched: &InterpolantSchedule, t: f64) -> Result<(f64, f64)> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("t = {t} outside (0, 1]")));
    }
    let alpha = sched.alpha(t);
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha({t}) = {alpha} is not positive")));
    }
    let kappa = sched.alpha_dot(t) / alpha;
    let beta = sched.beta(t);
    if beta == 0.0 {
        return Ok((kappa, 0.0));
    }
    let eta = beta * (kappa * beta - sched.beta_dot(t));
    if !kappa.is_finite() || !eta.is_finite() {
        return Err(Error::Domain(format!("non-finite coefficients at t = {t}")));
    }
    Ok((kappa, eta))
}

/// `sigma_mem(t)^2 = 2 eta_t`; avoids the square-root round trip.
pub fn sigma_mem_sq(sched: &InterpolantSchedule, t: f64) -> Result<f64> {
    let (_, eta) = score_velocity_coeffs(sched, t)?;
    if eta < 0.0 {
        return Err(Error::Domain(format!("memoryless radicand {eta} is negative at t = {t}; the scheduler is invalid")));
    }
    Ok(2.0 * eta)
}

/// The memoryless diffusion coefficient
/// `sqrt(2 beta_t (alpha_dot/alpha beta_t - beta_dot))`, which decouples the
/// endpoints of the stochastic interpolant.
pub fn sigma_mem(sched: &InterpolantSchedule, t: f64) -> Result<f64> {
    sigma_mem_sq(sched, t).map(f64::sqrt)
}

/// Drift `b = (1 + c) v - c kappa x` is affine in `v` and `x`; returns
/// `(c, kappa)` with `c = sigma^2 / (2 eta)`. Memoryless sampling has `c = 1`
/// exactly.
pub fn drift_coeffs(sched: &InterpolantSchedule, diff: &DiffusionSchedule, t: f64) -> Result<(f64, f64)> {
    if diff.is_zero() {
        return Ok((0.0, 0.0));
    }
    let (kappa, eta) = score_velocity_coeffs(sched, t)?;
    if matches!(diff, DiffusionSchedule::Memoryless) {
        return Ok((1.0, kappa));
    }
    let sigma = diff.sigma(sched, t)?;
    if sigma == 0.0 {
        return Ok((0.0, kappa));
    }
    if eta == 0.0 {
        return Err(Error::Domain(format!("zero drift-correction denominator at t = {t}")));
    }
    Ok((sigma * sigma / (2.0 * eta), kappa))
}

/// SDE drift with the same marginals as the velocity field `v`.
pub fn drift_from_velocity(sched: &InterpolantSchedule, diff: &DiffusionSchedule, v: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    crate::error::check_dim(v.len(), x.len())?;
    let (c, kappa) = drift_coeffs(sched, diff, t)?;
    if c == 0.0 {
        return Ok(v.to_vec());
    }
    if c == 1.0 {
        return Ok(v.iter().zip(x).map(|(vi, xi)| 2.0 * vi - kappa * xi).collect());
    }
    Ok(v.iter().zip(x).map(|(vi, xi)| vi + c * (vi - kappa * xi)).collect())
}

/// Velocity of an FM model induced by a noise-prediction network evaluated
/// at diffusion time `1 - t`: `v = kappa_t x - eta_t eps / beta_t`.
pub fn velocity_from_epsilon(sched: &InterpolantSchedule, eps: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    crate::error::check_dim(x.len(), eps.len())?;
    let beta = sched.beta(t);
    if !(t < 1.0) || !(beta > 0.0) {
        return Err(Error::Domain(format!("beta({t}) = {beta}; noise prediction is undefined at t = 1")));
    }
    let (kappa, eta) = score_velocity_coeffs(sched, t)?;
    Ok(x.iter().zip(eps).map(|(xi, ei)| kappa * xi - eta * ei / beta).collect())
}

/// Convert a VP noising chain into the FM schedule running noise to data.
pub fn vp_to_fm_schedule(table: &VpRateTable) -> Result<InterpolantSchedule> {
    if table.steps() < 2 {
        return Err(Error::Schedule(format!("VP table with K = {} steps is too coarse for a continuous rate", table.steps())));
    }
    let terminal = table.terminal_alpha_bar();
    if terminal > MAX_TERMINAL_ALPHA_BAR {
        return Err(Error::Schedule(format!(
            "chain leaves abar(1) = {terminal:.3e} > {MAX_TERMINAL_ALPHA_BAR:e}; the FM path would not start at noise"
        )));
    }
    let sched = InterpolantSchedule::VpInduced(table.clone());
    let a1 = sched.alpha(1.0);
    if (a1 - 1.0).abs() > 1e-6 {
        return Err(Error::Schedule(format!("alpha_FM(1) = {a1} deviates from 1")));
    }
    Ok(sched)
}
