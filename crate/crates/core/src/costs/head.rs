//! Synthetic subject-map heads: a differentiable map from the sampler state
//! to per-subject probability maps over a 2-D grid.
//!
//! For subject `s` and slot `k` the head projects `z = W_{s,k} x` into the
//! plane, scores each cell centre `g_j` by `-gamma |g_j - z|^2`, applies a
//! softmax, blurs with a truncated Gaussian kernel and renormalizes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ProbMap, SceneRows, SubjectMaps};
use crate::error::{check_dim, Error, Result};
use crate::rng::rng_from_seed;

/// Floor mixed into maps inside value and gradient computations.
pub const MAP_FLOOR: f64 = 1e-12;

/// Declarative description of a scene, as found in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub subjects: usize,
    pub maps_per_subject: usize,
    /// Cells per side.
    pub grid: usize,
    /// Half-width of the square covered by the grid.
    pub extent: f64,
    pub gamma: f64,
    /// Gaussian blur width in cells; 0 disables smoothing.
    pub smoothing: f64,
    /// Standard deviation of the per-slot perturbation of each subject's projection.
    pub jitter: f64,
    pub proj_scale: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { subjects: 2, maps_per_subject: 2, grid: 8, extent: 3.0, gamma: 2.0, smoothing: 1.0, jitter: 0.1, proj_scale: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapHead {
    shape: (usize, usize),
    anchors: Vec<[f64; 2]>,
    /// `projections[s][k]` is a row-major `2 x d` matrix.
    projections: Vec<Vec<Vec<f64>>>,
    state_dim: usize,
    gamma: f64,
    smoothing: f64,
    taps: Vec<f64>,
}

pub(crate) struct HeadForward {
    /// Per subject, per slot.
    slots: Vec<Vec<SlotForward>>,
}

struct SlotForward {
    z: [f64; 2],
    soft: Vec<f64>,
    blur_sum: f64,
    p: Vec<f64>,
    floored: Vec<f64>,
}

impl HeadForward {
    pub(crate) fn floored_rows(&self) -> SceneRows<'_> {
        self.slots.iter().map(|s| s.iter().map(|k| k.floored.as_slice()).collect()).collect()
    }
}

impl MapHead {
    /// Square `grid x grid` head covering `[-extent, extent]^2`.
    pub fn new(grid: usize, extent: f64, projections: Vec<Vec<Vec<f64>>>, gamma: f64, smoothing: f64) -> Result<Self> {
        if grid == 0 || !(extent > 0.0) {
            return Err(Error::Config("map grid needs at least one cell and a positive extent".into()));
        }
        if !(gamma >= 0.0) || !(smoothing >= 0.0) {
            return Err(Error::Config("map sharpness and smoothing must be nonnegative".into()));
        }
        if projections.is_empty() || projections.iter().any(Vec::is_empty) {
            return Err(Error::Config("every subject needs at least one map slot".into()));
        }
        let first = projections[0][0].len();
        if first == 0 || !first.is_multiple_of(2) || projections.iter().flatten().any(|w| w.len() != first) {
            return Err(Error::Config("projections must all be 2 x d matrices".into()));
        }
        let cell = 2.0 * extent / grid as f64;
        let mut anchors = Vec::with_capacity(grid * grid);
        for r in 0..grid {
            for c in 0..grid {
                anchors.push([-extent + (c as f64 + 0.5) * cell, -extent + (r as f64 + 0.5) * cell]);
            }
        }
        let taps = if smoothing > 0.0 {
            let radius = (3.0 * smoothing).ceil() as i64;
            let raw: Vec<f64> = (-radius..=radius).map(|o| (-(o * o) as f64 / (2.0 * smoothing * smoothing)).exp()).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| v / total).collect()
        } else {
            vec![1.0]
        };
        Ok(Self { shape: (grid, grid), anchors, projections, state_dim: first / 2, gamma, smoothing, taps })
    }

    /// Random head: subject projections with i.i.d. `N(0, proj_scale^2 / d)`
    /// entries, each slot perturbed by `jitter`.
    pub fn from_spec(spec: &SceneSpec, state_dim: usize) -> Result<Self> {
        if spec.subjects < 2 {
            return Err(Error::Config(format!("a scene needs at least 2 subjects, got {}", spec.subjects)));
        }
        if spec.maps_per_subject == 0 {
            return Err(Error::Config("maps_per_subject must be positive".into()));
        }
        if state_dim == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        let mut rng = rng_from_seed(spec.seed);
        let std = spec.proj_scale / (state_dim as f64).sqrt();
        let mut projections = Vec::with_capacity(spec.subjects);
        for _ in 0..spec.subjects {
            let base: Vec<f64> = (0..2 * state_dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
            let slots = (0..spec.maps_per_subject)
                .map(|_| base.iter().map(|w| w + spec.jitter * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            projections.push(slots);
        }
        Self::new(spec.grid, spec.extent, projections, spec.gamma, spec.smoothing)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn cells(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchors(&self) -> &[[f64; 2]] {
        &self.anchors
    }

    pub fn subjects(&self) -> usize {
        self.projections.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn projections(&self) -> &[Vec<Vec<f64>>] {
        &self.projections
    }

    fn project(&self, w: &[f64], x: &[f64]) -> [f64; 2] {
        let d = self.state_dim;
        [crate::linalg::dot(&w[..d], x), crate::linalg::dot(&w[d..], x)]
    }

    /// Separable blur with half-sample reflection at the border. The operator
    /// is symmetric and doubly stochastic, so it is its own transpose and
    /// keeps a uniform map uniform.
    fn blur(&self, a: &[f64]) -> Vec<f64> {
        if self.taps.len() == 1 {
            return a.to_vec();
        }
        let (h, w) = self.shape;
        let r = (self.taps.len() / 2) as i64;
        let mut tmp = vec![0.0; a.len()];
        for row in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (ti, tap) in self.taps.iter().enumerate() {
                    acc += tap * a[row * w + reflect(col as i64 + ti as i64 - r, w)];
                }
                tmp[row * w + col] = acc;
            }
        }
        let mut out = vec![0.0; a.len()];
        for row in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (ti, tap) in self.taps.iter().enumerate() {
                    acc += tap * tmp[reflect(row as i64 + ti as i64 - r, h) * w + col];
                }
                out[row * w + col] = acc;
            }
        }
        out
    }

    fn slot_forward(&self, w: &[f64], x: &[f64]) -> SlotForward {
        let z = self.project(w, x);
        let logits: Vec<f64> = self.anchors.iter().map(|g| -self.gamma * ((g[0] - z[0]).powi(2) + (g[1] - z[1]).powi(2))).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut soft: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let s: f64 = soft.iter().sum();
        soft.iter_mut().for_each(|v| *v /= s);
        let blurred = self.blur(&soft);
        let blur_sum: f64 = blurred.iter().sum();
        let p: Vec<f64> = blurred.iter().map(|v| v / blur_sum).collect();
        let denom = 1.0 + self.cells() as f64 * MAP_FLOOR;
        let floored = p.iter().map(|v| (v + MAP_FLOOR) / denom).collect();
        SlotForward { z, soft, blur_sum, p, floored }
    }

    pub(crate) fn forward(&self, x: &[f64]) -> Result<HeadForward> {
        check_dim(self.state_dim, x.len())?;
        let slots = self.projections.iter().map(|ws| ws.iter().map(|w| self.slot_forward(w, x)).collect()).collect();
        Ok(HeadForward { slots })
    }

    /// Pull `d cost / d floored map` back to `d cost / d x`.
    pub(crate) fn backward(&self, fwd: &HeadForward, grad: &[Vec<Vec<f64>>]) -> Vec<f64> {
        let d = self.state_dim;
        let denom = 1.0 + self.cells() as f64 * MAP_FLOOR;
        let mut gx = vec![0.0; d];
        for ((ws, fs), gs) in self.projections.iter().zip(&fwd.slots).zip(grad) {
            for ((w, f), gp) in ws.iter().zip(fs).zip(gs) {
                let dp: Vec<f64> = gp.iter().map(|v| v / denom).collect();
                let inner = crate::linalg::dot(&dp, &f.p);
                let dr: Vec<f64> = dp.iter().map(|v| (v - inner) / f.blur_sum).collect();
                let da = self.blur(&dr);
                let inner = crate::linalg::dot(&da, &f.soft);
                let mut dz = [0.0; 2];
                for ((g, a), dav) in self.anchors.iter().zip(&f.soft).zip(&da) {
                    let dl = a * (dav - inner);
                    dz[0] += dl * -2.0 * self.gamma * (f.z[0] - g[0]);
                    dz[1] += dl * -2.0 * self.gamma * (f.z[1] - g[1]);
                }
                for i in 0..d {
                    gx[i] += w[i] * dz[0] + w[d + i] * dz[1];
                }
            }
        }
        gx
    }

    /// Unfloored maps for every subject.
    pub fn maps_from_state(&self, x: &[f64]) -> Result<Vec<SubjectMaps>> {
        let fwd = self.forward(x)?;
        fwd.slots
            .into_iter()
            .enumerate()
            .map(|(s, slots)| SubjectMaps::new(s, slots.into_iter().map(|k| ProbMap::from_raw(k.p, self.shape)).collect()))
            .collect()
    }
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{focus_cost, grad_cost_state, CostKind, SceneCost, StateCost};

    fn eye(d: usize, sign: f64) -> Vec<f64> {
        let mut w = vec![0.0; 2 * d];
        w[0] = sign;
        w[d + 1] = sign;
        w
    }

    #[test]
    fn flat_head_gives_uniform_maps() {
        let head = MapHead::new(4, 2.0, vec![vec![eye(2, 1.0)], vec![eye(2, -1.0)]], 0.0, 2.0).unwrap();
        for s in head.maps_from_state(&[0.7, -1.3]).unwrap() {
            for m in s.maps() {
                assert!(m.weights().iter().all(|w| (w - 1.0 / 16.0).abs() < 1e-15));
            }
        }
        assert!(grad_cost_state(&head, CostKind::Focus, &[0.7, -1.3]).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn sharp_head_concentrates_on_the_anchor() {
        let head = MapHead::new(8, 4.0, vec![vec![eye(2, 1.0)], vec![eye(2, -1.0)]], 200.0, 0.0).unwrap();
        let k = 8 * 5 + 6;
        let g = head.anchors()[k];
        let maps = head.maps_from_state(&g).unwrap();
        assert_eq!(maps[0].maps()[0].argmax(), k);
        assert!(maps[0].maps()[0].weights()[k] > 1.0 - 1e-9);
    }

    #[test]
    fn equal_projections_give_entangled_means() {
        let head = MapHead::new(6, 3.0, vec![vec![eye(2, 1.0)], vec![eye(2, 1.0)]], 1.5, 1.0).unwrap();
        let scene = head.maps_from_state(&[0.4, 0.2]).unwrap();
        assert_eq!(scene[0].mean_map(), scene[1].mean_map());
        assert!((focus_cost(&scene).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn maps_are_valid_for_large_states() {
        let head = MapHead::from_spec(&SceneSpec::default(), 2).unwrap();
        for s in head.maps_from_state(&[40.0, -25.0]).unwrap() {
            for m in s.maps() {
                assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(m.weights().iter().all(|w| *w >= 0.0));
            }
        }
    }

    #[test]
    fn state_gradient_matches_differences() {
        let spec = SceneSpec { seed: 3, ..SceneSpec::default() };
        let head = MapHead::from_spec(&spec, 2).unwrap();
        for kind in [CostKind::Focus, CostKind::CosineSeparation, CostKind::Entropy] {
            let cost = SceneCost::new(head.clone(), kind);
            let x = [0.6, -0.9];
            let g = cost.grad(&x).unwrap();
            let h = 1e-6;
            for i in 0..2 {
                let mut xp = x;
                xp[i] += h;
                let mut xm = x;
                xm[i] -= h;
                let fd = (cost.value(&xp).unwrap() - cost.value(&xm).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-3), "{kind:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn spec_rejects_single_subject() {
        let spec = SceneSpec { subjects: 1, ..SceneSpec::default() };
        assert!(MapHead::from_spec(&spec, 2).is_err());
    }
}
