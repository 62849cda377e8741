//! Euler and Euler-Maruyama integration of base and controlled dynamics.
//!
//! Every stochastic run records its standard-normal draws so it can be
//! replayed bit for bit, which the adjoint pass relies on.

use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costs::StateCost;
use crate::error::{check_dim, Error, Result};
use crate::field::VelocityField;
use crate::linalg::all_finite;
use crate::rng::{gaussian_vec, rng_from_seed};
use crate::schedules::{drift_from_velocity, sigma_mem_sq, DiffusionSchedule, InterpolantSchedule};

pub const DEFAULT_STEPS: usize = 28;
pub const DEFAULT_T_START: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Ode,
    Sde,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub mode: SampleMode,
    pub diffusion: DiffusionSchedule,
    pub t_start: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::ode(DEFAULT_STEPS)
    }
}

impl SamplerConfig {
    pub fn ode(steps: usize) -> Self {
        Self { steps, mode: SampleMode::Ode, diffusion: DiffusionSchedule::Zero, t_start: DEFAULT_T_START }
    }

    pub fn sde(steps: usize, diffusion: DiffusionSchedule) -> Self {
        Self { steps, mode: SampleMode::Sde, diffusion, t_start: DEFAULT_T_START }
    }

    pub fn memoryless(steps: usize) -> Self {
        Self::sde(steps, DiffusionSchedule::Memoryless)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!("need at least 2 sampler steps, got {}", self.steps)));
        }
        let first_interior = self.t_start + (1.0 - self.t_start) / self.steps as f64;
        if !(self.t_start > 0.0 && self.t_start < first_interior && first_interior < 1.0) {
            return Err(Error::Config(format!("t_start = {} must lie in (0, 1)", self.t_start)));
        }
        Ok(())
    }

    /// Uniform grid `t_start = t_0 < ... < t_N = 1`.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.steps;
        let h = (1.0 - self.t_start) / n as f64;
        let mut times: Vec<f64> = (0..n).map(|i| self.t_start + i as f64 * h).collect();
        times.push(1.0);
        times
    }
}

/// A sampled path with the noise that drove it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Standard-normal draws `xi_i`, one per step; the Brownian increment
    /// is `sqrt(dt_i) xi_i`. Empty for ODE runs.
    pub noises: Vec<Vec<f64>>,
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn start(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn is_stochastic(&self) -> bool {
        !self.noises.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "t")?;
        for k in 0..self.dim() {
            write!(w, ",x_{k}")?;
        }
        writeln!(w)?;
        for (t, x) in self.times.iter().zip(&self.states) {
            write!(w, "{t:?}")?;
            for v in x {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Binary replay format, little-endian:
    /// `b"FTRJ" | version u32 | dim u32 | n_times u32 | has_seed u8 | seed u64 |
    /// times f64 * n | states f64 * n * dim | n_noises u32 | noises f64 * n_noises * dim`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = Vec::new();
        out.extend_from_slice(TRAJ_MAGIC);
        out.extend_from_slice(&TRAJ_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.times.len() as u32).to_le_bytes());
        out.push(self.seed.is_some() as u8);
        out.extend_from_slice(&self.seed.unwrap_or(0).to_le_bytes());
        for t in &self.times {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for v in self.states.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.noises.len() as u32).to_le_bytes());
        for v in self.noises.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(4)? != TRAJ_MAGIC {
            return Err(corrupt("missing FTRJ magic"));
        }
        if r.u32()? != TRAJ_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let d = r.u32()? as usize;
        let n = r.u32()? as usize;
        let has_seed = r.take(1)?[0] != 0;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let times = r.floats(n)?;
        let states = r.rows(n, d)?;
        let n_noise = r.u32()? as usize;
        let noises = r.rows(n_noise, d)?;
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { times, states, noises, seed: has_seed.then_some(seed) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

const TRAJ_MAGIC: &[u8; 4] = b"FTRJ";
const TRAJ_VERSION: u32 = 1;

fn corrupt(msg: &str) -> Error {
    Error::Integrity(format!("trajectory file: {msg}"))
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn rows(&mut self, n: usize, d: usize) -> Result<Vec<Vec<f64>>> {
        let flat = self.floats(n.checked_mul(d).ok_or_else(|| corrupt("size overflow"))?)?;
        Ok(if d == 0 { vec![Vec::new(); n] } else { flat.chunks(d).map(<[f64]>::to_vec).collect() })
    }
}

/// Where the Gaussian draws of a stochastic run come from.
pub enum Noise<'a> {
    Seed(u64),
    Tape(&'a [Vec<f64>]),
}

/// Optional velocity offset evaluated at the pre-update state. `None` means
/// no offset, and the base update is taken untouched.
pub type VelocityShift<'a> = dyn FnMut(&[f64], f64) -> Result<Option<Vec<f64>>> + 'a;

/// Shared integrator. ODE runs ignore `noise`.
pub fn integrate(
    field: &dyn VelocityField,
    sched: &InterpolantSchedule,
    cfg: &SamplerConfig,
    x0: &[f64],
    noise: Noise<'_>,
    shift: &mut VelocityShift<'_>,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_dim(field.dim(), x0.len())?;
    let times = cfg.grid();
    let n = cfg.steps;
    let stochastic = cfg.mode == SampleMode::Sde;
    let (mut rng, tape, seed) = match noise {
        Noise::Seed(s) => (Some(rng_from_seed(s)), None, Some(s)),
        Noise::Tape(t) => {
            if stochastic && t.len() != n {
                return Err(Error::GridMismatch(format!("noise tape has {} entries for {n} steps", t.len())));
            }
            (None, Some(t), None)
        }
    };
    let mut states = Vec::with_capacity(n + 1);
    let mut noises = Vec::with_capacity(if stochastic { n } else { 0 });
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    for i in 0..n {
        let (t, dt) = (times[i], times[i + 1] - times[i]);
        let mut v = field.velocity(&x, t);
        if let Some(s) = shift(&x, t)? {
            check_dim(v.len(), s.len())?;
            for (vi, si) in v.iter_mut().zip(&s) {
                *vi += si;
            }
        }
        if stochastic {
            let b = drift_from_velocity(sched, &cfg.diffusion, &v, &x, t)?;
            let sigma = cfg.diffusion.sigma(sched, t)?;
            let xi = match (&mut rng, tape) {
                (Some(r), _) => gaussian_vec(r, x.len()),
                (None, Some(tape)) => {
                    check_dim(x.len(), tape[i].len())?;
                    tape[i].clone()
                }
                (None, None) => unreachable!(),
            };
            let scale = sigma * dt.sqrt();
            for k in 0..x.len() {
                x[k] += b[k] * dt;
                if sigma != 0.0 {
                    x[k] += scale * xi[k];
                }
            }
            noises.push(xi);
        } else {
            for (xk, vk) in x.iter_mut().zip(&v) {
                *xk += vk * dt;
            }
        }
        if !all_finite(&x) {
            return Err(Error::Numerical(format!("non-finite state at step {} (t = {})", i + 1, times[i + 1])));
        }
        states.push(x.clone());
    }
    Ok(Trajectory { times, states, noises, seed })
}

fn no_shift(_: &[f64], _: f64) -> Result<Option<Vec<f64>>> {
    Ok(None)
}

fn require_mode(cfg: &SamplerConfig, mode: SampleMode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::Config(format!("sampler configured for {:?}, called as {mode:?}", cfg.mode)));
    }
    Ok(())
}

/// `X_{i+1} = X_i + v(X_i, t_i) dt_i`.
pub fn sample_ode(field: &dyn VelocityField, sched: &InterpolantSchedule, cfg: &SamplerConfig, x0: &[f64]) -> Result<Trajectory> {
    require_mode(cfg, SampleMode::Ode)?;
    integrate(field, sched, cfg, x0, Noise::Seed(0), &mut no_shift).map(|mut t| {
        t.seed = None;
        t
    })
}

/// `X_{i+1} = X_i + b(X_i, t_i) dt_i + sigma(t_i) sqrt(dt_i) xi_i`.
pub fn sample_sde(
    field: &dyn VelocityField,
    sched: &InterpolantSchedule,
    cfg: &SamplerConfig,
    x0: &[f64],
    seed: u64,
) -> Result<Trajectory> {
    require_mode(cfg, SampleMode::Sde)?;
    integrate(field, sched, cfg, x0, Noise::Seed(seed), &mut no_shift)
}

/// Re-run a recorded trajectory from its start state and noise tape.
pub fn replay(field: &dyn VelocityField, sched: &InterpolantSchedule, cfg: &SamplerConfig, traj: &Trajectory) -> Result<Trajectory> {
    let mut out = integrate(field, sched, cfg, traj.start(), Noise::Tape(&traj.noises), &mut no_shift)?;
    out.seed = traj.seed;
    Ok(out)
}

/// Test-time controlled ODE: velocity `v - (1 - t) grad f` with
/// `f(x, t) = lambda sigma_mem(t)^2 H(x)`.
pub fn sample_controlled_ode(
    field: &dyn VelocityField,
    sched: &InterpolantSchedule,
    cfg: &SamplerConfig,
    cost: &dyn StateCost,
    lambda: f64,
    x0: &[f64],
) -> Result<Trajectory> {
    require_mode(cfg, SampleMode::Ode)?;
    check_dim(x0.len(), cost.dim()).map_err(|e| Error::Cost(e.to_string()))?;
    let mut shift = |x: &[f64], t: f64| -> Result<Option<Vec<f64>>> {
        if lambda == 0.0 {
            return Ok(None);
        }
        let w = lambda * sigma_mem_sq(sched, t)? * (1.0 - t);
        let g = cost.grad(x)?;
        Ok(Some(g.iter().map(|gi| -w * gi).collect()))
    };
    let mut traj = integrate(field, sched, cfg, x0, Noise::Seed(0), &mut shift)?;
    traj.seed = None;
    Ok(traj)
}

/// Test-time controlled SDE: velocity `v - (sigma^2 / 2)(1 - t) lambda grad H`,
/// then the usual drift correction and noise.
pub fn sample_controlled_sde(
    field: &dyn VelocityField,
    sched: &InterpolantSchedule,
    cfg: &SamplerConfig,
    cost: &dyn StateCost,
    lambda: f64,
    x0: &[f64],
    seed: u64,
) -> Result<Trajectory> {
    require_mode(cfg, SampleMode::Sde)?;
    check_dim(x0.len(), cost.dim()).map_err(|e| Error::Cost(e.to_string()))?;
    let mut shift = |x: &[f64], t: f64| -> Result<Option<Vec<f64>>> {
        if lambda == 0.0 {
            return Ok(None);
        }
        let sigma = cfg.diffusion.sigma(sched, t)?;
        Ok(Some(controlled_sde_shift(sigma, t, lambda, &cost.grad(x)?)))
    };
    integrate(field, sched, cfg, x0, Noise::Seed(seed), &mut shift)
}

/// `-(sigma^2 / 2)(1 - t) lambda grad_h`.
pub fn controlled_sde_shift(sigma: f64, t: f64, lambda: f64, grad_h: &[f64]) -> Vec<f64> {
    let w = 0.5 * sigma * sigma * (1.0 - t) * lambda;
    grad_h.iter().map(|g| -w * g).collect()
}

/// Run many trajectories; seeds are `base_seed + i`.
pub fn sample_many<F>(count: usize, base_seed: u64, mut run: F) -> Result<Vec<Trajectory>>
where
    F: FnMut(u64) -> Result<Trajectory>,
{
    (0..count as u64).map(|i| run(base_seed + i)).collect()
}

/// Initial states `x0 ~ N(0, I)` drawn from a dedicated seed stream.
pub fn source_samples(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = crate::rng::stream_rng(seed, 0x5eed);
    (0..count).map(|_| gaussian_vec(&mut rng, dim)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, LinearField};

    const RF: InterpolantSchedule = InterpolantSchedule::RectifiedFlow;

    #[test]
    fn grid_shape() {
        let g = SamplerConfig::default().grid();
        assert_eq!(g.len(), 29);
        assert_eq!(g[0], 1e-3);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(SamplerConfig::ode(1).validate().is_err());
    }

    #[test]
    fn constant_field_is_exact() {
        let f = ConstantField { value: vec![0.3, -1.1] };
        let x0 = [1.0, 2.0];
        let tr = sample_ode(&f, &RF, &SamplerConfig::ode(28), &x0).unwrap();
        let end = tr.endpoint();
        assert!((end[0] - (1.0 + 0.3 * 0.999)).abs() < 1e-12);
        assert!((end[1] - (2.0 - 1.1 * 0.999)).abs() < 1e-12);
        assert!(tr.noises.is_empty());
    }

    #[test]
    fn linear_decay_matches_exponential() {
        let f = LinearField::new(2, vec![-1.0, 0.0, 0.0, -1.0]);
        let x0 = [1.5, -0.5];
        let tr = sample_ode(&f, &RF, &SamplerConfig::ode(1000), &x0).unwrap();
        let decay = (-(1.0 - 1e-3f64)).exp();
        for (x1, x) in tr.endpoint().iter().zip(x0) {
            assert!((x1 - x * decay).abs() < 1e-2);
        }
    }

    #[test]
    fn zero_sigma_sde_equals_ode() {
        let f = LinearField::new(2, vec![-0.5, 0.2, 0.1, 0.3]);
        let x0 = [0.4, 0.9];
        let ode = sample_ode(&f, &RF, &SamplerConfig::ode(28), &x0).unwrap();
        let sde = sample_sde(&f, &RF, &SamplerConfig::sde(28, DiffusionSchedule::Zero), &x0, 7).unwrap();
        assert_eq!(ode.states, sde.states);
        assert_eq!(sde.noises.len(), 28);
    }

    #[test]
    fn seeded_runs_and_replays_are_bitwise() {
        let f = LinearField::new(2, vec![-0.5, 0.2, 0.1, 0.3]);
        let cfg = SamplerConfig::memoryless(28);
        let a = sample_sde(&f, &RF, &cfg, &[0.1, 0.2], 11).unwrap();
        let b = sample_sde(&f, &RF, &cfg, &[0.1, 0.2], 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(replay(&f, &RF, &cfg, &a).unwrap().states, a.states);
        let c = sample_sde(&f, &RF, &cfg, &[0.1, 0.2], 12).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn binary_round_trip() {
        let f = LinearField::new(2, vec![-0.5, 0.2, 0.1, 0.3]);
        let a = sample_sde(&f, &RF, &SamplerConfig::memoryless(5), &[0.1, 0.2], 3).unwrap();
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"FTRJ");
        assert_eq!(Trajectory::from_bytes(&bytes).unwrap(), a);
        assert!(Trajectory::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let ode = sample_ode(&f, &RF, &SamplerConfig::ode(5), &[0.1, 0.2]).unwrap();
        assert_eq!(Trajectory::from_bytes(&ode.to_bytes()).unwrap(), ode);
    }

    #[test]
    fn csv_layout() {
        let f = ConstantField { value: vec![1.0, 0.0] };
        let tr = sample_ode(&f, &RF, &SamplerConfig::ode(2), &[0.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x_0,x_1");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("1.0,"));
    }

    #[test]
    fn sde_shift_example() {
        assert_eq!(controlled_sde_shift(2.0, 0.5, 1.0, &[1.0, -1.0]), vec![-1.0, 1.0]);
        assert_eq!(controlled_sde_shift(2.0, 1.0, 1.0, &[5.0, 3.0]), vec![-0.0, -0.0]);
    }

    #[test]
    fn wrong_mode_is_rejected() {
        let f = ConstantField { value: vec![1.0] };
        assert!(sample_ode(&f, &RF, &SamplerConfig::memoryless(4), &[0.0]).is_err());
        assert!(sample_sde(&f, &RF, &SamplerConfig::ode(4), &[0.0], 0).is_err());
    }

    #[test]
    fn blow_up_is_a_numerical_error() {
        let f = LinearField::new(1, vec![1e308]);
        let err = sample_ode(&f, &RF, &SamplerConfig::ode(10), &[1e10]).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }
}
