//! Running costs over probability maps, and state costs built on top of them.

mod head;
pub mod pgm;

use serde::{Deserialize, Serialize};

pub use head::{MapHead, SceneSpec};

use crate::error::{check_dim, Error, Result};
use crate::schedules::{sigma_mem_sq, InterpolantSchedule};

/// A point on the simplex over an `H x W` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    weights: Vec<f64>,
    shape: (usize, usize),
}

impl ProbMap {
    pub fn new(weights: Vec<f64>, shape: (usize, usize)) -> Result<Self> {
        if shape.0 * shape.1 != weights.len() || weights.is_empty() {
            return Err(Error::GridMismatch(format!("{} weights for a {}x{} grid", weights.len(), shape.0, shape.1)));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Domain("probability weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("probability weights sum to {total}")));
        }
        Ok(Self { weights, shape })
    }

    /// A 1 x G map, handy for small hand examples.
    pub fn from_slice(weights: &[f64]) -> Result<Self> {
        Self::new(weights.to_vec(), (1, weights.len()))
    }

    pub fn uniform(shape: (usize, usize)) -> Self {
        let g = shape.0 * shape.1;
        Self { weights: vec![1.0 / g as f64; g], shape }
    }

    pub fn point_mass(shape: (usize, usize), cell: usize) -> Self {
        let mut weights = vec![0.0; shape.0 * shape.1];
        weights[cell] = 1.0;
        Self { weights, shape }
    }

    pub(crate) fn from_raw(weights: Vec<f64>, shape: (usize, usize)) -> Self {
        Self { weights, shape }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = j;
            }
        }
        best
    }
}

/// All maps collected for one subject, with their cached mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMaps {
    pub subject_id: usize,
    maps: Vec<ProbMap>,
    mean: ProbMap,
}

impl SubjectMaps {
    pub fn new(subject_id: usize, maps: Vec<ProbMap>) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Config(format!("subject {subject_id} has no maps")))?;
        let shape = first.shape();
        if maps.iter().any(|m| m.shape() != shape) {
            return Err(Error::GridMismatch(format!("subject {subject_id} mixes grid shapes")));
        }
        let mean = ProbMap::from_raw(mean_of(maps.iter().map(ProbMap::weights)), shape);
        Ok(Self { subject_id, maps, mean })
    }

    pub fn maps(&self) -> &[ProbMap] {
        &self.maps
    }

    pub fn mean_map(&self) -> &ProbMap {
        &self.mean
    }
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if acc.is_empty() {
            acc = vec![0.0; r.len()];
        }
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        n += 1;
    }
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

fn same_grid(maps: &[&ProbMap]) -> Result<()> {
    if let Some(first) = maps.first() {
        if maps.iter().any(|m| m.shape() != first.shape()) {
            return Err(Error::GridMismatch("maps live on different grids".into()));
        }
    }
    Ok(())
}

/// `sum_i p_i log(p_i / q_i)`; `f64::INFINITY` when `p` is not absolutely
/// continuous with respect to `q`.
pub fn kl_div(p: &ProbMap, q: &ProbMap) -> Result<f64> {
    same_grid(&[p, q])?;
    Ok(kl_raw(p.weights(), q.weights()))
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi == 0.0 {
            continue;
        }
        if *qi == 0.0 {
            return f64::INFINITY;
        }
        acc += pi * (pi / qi).ln();
    }
    acc.max(0.0)
}

/// Generalized Jensen-Shannon divergence `(1/n) sum_i KL(p_i || m)`.
pub fn jsd(maps: &[&ProbMap]) -> Result<f64> {
    same_grid(maps)?;
    let rows: Vec<&[f64]> = maps.iter().map(|m| m.weights()).collect();
    Ok(jsd_raw(&rows))
}

fn jsd_raw(rows: &[&[f64]]) -> f64 {
    jsd_scaled(rows, 1.0)
}

/// `(1/n) sum_i KL(p_i || m) / scale`, with `m_j = S_j / n` folded into the
/// log as `n p_ij / S_j`. Dividing each row before averaging makes disjoint
/// point masses land on exactly `log n / scale`.
fn jsd_scaled(rows: &[&[f64]], scale: f64) -> f64 {
    // Identical maps are exactly zero; the mean would otherwise round.
    if rows.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let n = rows.len() as f64;
    let mut sums = vec![0.0; rows[0].len()];
    for r in rows {
        for (s, v) in sums.iter_mut().zip(*r) {
            *s += v;
        }
    }
    let row_kl = |p: &[f64]| -> f64 {
        let kl: f64 = p.iter().zip(&sums).filter(|(pi, _)| **pi > 0.0).map(|(pi, s)| pi * (n * pi / s).ln()).sum();
        kl.max(0.0) / scale
    };
    rows.iter().map(|p| row_kl(p)).sum::<f64>() / n
}

/// JSD divided by its upper bound `log n`; 0 for a single map.
pub fn jsd_normalized(maps: &[&ProbMap]) -> Result<f64> {
    same_grid(maps)?;
    let rows: Vec<&[f64]> = maps.iter().map(|m| m.weights()).collect();
    Ok(jsd_norm_raw(&rows))
}

fn jsd_norm_raw(rows: &[&[f64]]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    jsd_scaled(rows, (n as f64).ln()).clamp(0.0, 1.0)
}

/// d jsd_normalized / d p_ij = log(p_ij / m_j) / (n log n). Requires
/// strictly positive maps.
fn jsd_norm_grad(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    let n = rows.len();
    if n < 2 {
        return rows.iter().map(|r| vec![0.0; r.len()]).collect();
    }
    let m = mean_of(rows.iter().copied());
    let scale = 1.0 / (n as f64 * (n as f64).ln());
    rows.iter().map(|p| p.iter().zip(&m).map(|(pi, mi)| scale * (pi / mi).ln()).collect()).collect()
}

fn check_scene(scene: &[SubjectMaps]) -> Result<()> {
    if scene.len() < 2 {
        return Err(Error::Config(format!("need at least 2 subjects, got {}", scene.len())));
    }
    let all: Vec<&ProbMap> = scene.iter().flat_map(|s| s.maps()).collect();
    same_grid(&all)
}

/// Weights of a scene: per subject, per map.
type SceneRows<'a> = Vec<Vec<&'a [f64]>>;

fn scene_rows(scene: &[SubjectMaps]) -> SceneRows<'_> {
    scene.iter().map(|s| s.maps().iter().map(ProbMap::weights).collect()).collect()
}

/// `1/2 mean_s JSDn(P_s) + 1/2 (1 - JSDn({m_s}))`.
pub fn focus_cost(scene: &[SubjectMaps]) -> Result<f64> {
    check_scene(scene)?;
    Ok(focus_raw(&scene_rows(scene)))
}

fn focus_raw(rows: &SceneRows<'_>) -> f64 {
    let within = rows.iter().map(|p| jsd_norm_raw(p)).sum::<f64>() / rows.len() as f64;
    let means: Vec<Vec<f64>> = rows.iter().map(|p| mean_of(p.iter().copied())).collect();
    let mrefs: Vec<&[f64]> = means.iter().map(Vec::as_slice).collect();
    0.5 * within + 0.5 * (1.0 - jsd_norm_raw(&mrefs))
}

fn focus_grad(rows: &SceneRows<'_>) -> Vec<Vec<Vec<f64>>> {
    let s_count = rows.len() as f64;
    let means: Vec<Vec<f64>> = rows.iter().map(|p| mean_of(p.iter().copied())).collect();
    let mrefs: Vec<&[f64]> = means.iter().map(Vec::as_slice).collect();
    let between = jsd_norm_grad(&mrefs);
    rows.iter()
        .zip(&between)
        .map(|(p, gm)| {
            let within = jsd_norm_grad(p);
            let inv_n = 1.0 / p.len() as f64;
            within.into_iter().map(|gw| gw.iter().zip(gm).map(|(a, b)| 0.5 / s_count * a - 0.5 * inv_n * b).collect()).collect()
        })
        .collect()
}

/// `gamma_reg * mean_s (1 - H(m_s) / log G)`.
pub fn entropy_regularizer(scene: &[SubjectMaps], gamma_reg: f64) -> f64 {
    if gamma_reg == 0.0 || scene.is_empty() {
        return 0.0;
    }
    gamma_reg * entropy_raw(&scene_rows(scene))
}

fn entropy_raw(rows: &SceneRows<'_>) -> f64 {
    let mut acc = 0.0;
    for p in rows {
        let m = mean_of(p.iter().copied());
        let g = m.len();
        if g < 2 {
            continue;
        }
        let h: f64 = m.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum();
        acc += (1.0 - h / (g as f64).ln()).clamp(0.0, 1.0);
    }
    acc / rows.len() as f64
}

fn entropy_grad(rows: &SceneRows<'_>) -> Vec<Vec<Vec<f64>>> {
    let s_count = rows.len() as f64;
    rows.iter()
        .map(|p| {
            let m = mean_of(p.iter().copied());
            let g = m.len();
            let scale = if g < 2 { 0.0 } else { 1.0 / (s_count * p.len() as f64 * (g as f64).ln()) };
            let gm: Vec<f64> = m.iter().map(|v| scale * (v.ln() + 1.0)).collect();
            vec![gm; p.len()]
        })
        .collect()
}

/// Mean pairwise cosine similarity of subject mean maps.
pub fn cosine_separation_cost(scene: &[SubjectMaps]) -> Result<f64> {
    check_scene(scene)?;
    Ok(cosine_raw(&scene_rows(scene)))
}

fn cosine_raw(rows: &SceneRows<'_>) -> f64 {
    let means: Vec<Vec<f64>> = rows.iter().map(|p| mean_of(p.iter().copied())).collect();
    let norms: Vec<f64> = means.iter().map(|m| crate::linalg::norm(m)).collect();
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            acc += crate::linalg::dot(&means[a], &means[b]) / (norms[a] * norms[b]);
            pairs += 1;
        }
    }
    acc / pairs as f64
}

fn cosine_grad(rows: &SceneRows<'_>) -> Vec<Vec<Vec<f64>>> {
    let means: Vec<Vec<f64>> = rows.iter().map(|p| mean_of(p.iter().copied())).collect();
    let norms: Vec<f64> = means.iter().map(|m| crate::linalg::norm(m)).collect();
    let s = means.len();
    let pairs = (s * (s - 1) / 2) as f64;
    let g = means[0].len();
    let mut gm = vec![vec![0.0; g]; s];
    for a in 0..s {
        for b in a + 1..s {
            let c = crate::linalg::dot(&means[a], &means[b]) / (norms[a] * norms[b]);
            for j in 0..g {
                gm[a][j] += (means[b][j] / (norms[a] * norms[b]) - c * means[a][j] / (norms[a] * norms[a])) / pairs;
                gm[b][j] += (means[a][j] / (norms[a] * norms[b]) - c * means[b][j] / (norms[b] * norms[b])) / pairs;
            }
        }
    }
    rows.iter()
        .zip(gm)
        .map(|(p, g)| {
            let inv = 1.0 / p.len() as f64;
            vec![g.iter().map(|v| v * inv).collect(); p.len()]
        })
        .collect()
}

/// Which map-level cost a [`SceneCost`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Focus,
    CosineSeparation,
    /// The entropy regularizer alone, with weight 1.
    Entropy,
}

/// A scalar heuristic `H(x)` on the sampler state with an exact gradient.
pub trait StateCost: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn grad(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Time weighting `w(t)` of a running cost `f(x, t) = lambda w(t) H(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeWeight {
    #[default]
    Unit,
    /// `w(t) = sigma_mem(t)^2`.
    SigmaMemSq,
}

impl TimeWeight {
    pub fn at(self, sched: &InterpolantSchedule, t: f64) -> Result<f64> {
        match self {
            TimeWeight::Unit => Ok(1.0),
            TimeWeight::SigmaMemSq => sigma_mem_sq(sched, t),
        }
    }
}

/// `f(x, t) = lambda w(t) H(x)`.
#[derive(Clone, Copy)]
pub struct RunningCost<'a> {
    pub heuristic: &'a dyn StateCost,
    pub lambda: f64,
    pub weight: TimeWeight,
}

impl<'a> RunningCost<'a> {
    pub fn new(heuristic: &'a dyn StateCost, lambda: f64, weight: TimeWeight) -> Self {
        Self { heuristic, lambda, weight }
    }

    pub fn value(&self, sched: &InterpolantSchedule, x: &[f64], t: f64) -> Result<f64> {
        if self.lambda == 0.0 {
            return Ok(0.0);
        }
        Ok(self.lambda * self.weight.at(sched, t)? * self.heuristic.value(x)?)
    }

    /// `None` when the cost is switched off.
    pub fn grad(&self, sched: &InterpolantSchedule, x: &[f64], t: f64) -> Result<Option<Vec<f64>>> {
        if self.lambda == 0.0 {
            return Ok(None);
        }
        let w = self.lambda * self.weight.at(sched, t)?;
        Ok(Some(self.heuristic.grad(x)?.iter().map(|g| w * g).collect()))
    }
}

/// `H(x) = <w, x>`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCost {
    pub w: Vec<f64>,
}

impl StateCost for LinearCost {
    fn dim(&self) -> usize {
        self.w.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.w.len(), x.len())?;
        Ok(crate::linalg::dot(&self.w, x))
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.w.len(), x.len())?;
        Ok(self.w.clone())
    }
}

/// `H(x) = scale / 2 |x - center|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub center: Vec<f64>,
    pub scale: f64,
}

impl StateCost for QuadraticCost {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.center.len(), x.len())?;
        Ok(0.5 * self.scale * crate::linalg::dist(x, &self.center).powi(2))
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.center.len(), x.len())?;
        Ok(x.iter().zip(&self.center).map(|(a, c)| self.scale * (a - c)).collect())
    }
}

/// A map-level cost composed with a [`MapHead`], plus the optional entropy
/// regularizer. Values and gradients use floored maps so they stay finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCost {
    pub head: MapHead,
    pub kind: CostKind,
    pub gamma_reg: f64,
}

impl SceneCost {
    pub fn new(head: MapHead, kind: CostKind) -> Self {
        Self { head, kind, gamma_reg: 0.0 }
    }

    fn rows_value(&self, rows: &SceneRows<'_>) -> f64 {
        let base = match self.kind {
            CostKind::Focus => focus_raw(rows),
            CostKind::CosineSeparation => cosine_raw(rows),
            CostKind::Entropy => entropy_raw(rows),
        };
        if self.gamma_reg != 0.0 && self.kind != CostKind::Entropy {
            base + self.gamma_reg * entropy_raw(rows)
        } else {
            base
        }
    }

    fn rows_grad(&self, rows: &SceneRows<'_>) -> Vec<Vec<Vec<f64>>> {
        let mut g = match self.kind {
            CostKind::Focus => focus_grad(rows),
            CostKind::CosineSeparation => cosine_grad(rows),
            CostKind::Entropy => entropy_grad(rows),
        };
        if self.gamma_reg != 0.0 && self.kind != CostKind::Entropy {
            for (gs, es) in g.iter_mut().zip(entropy_grad(rows)) {
                for (gk, ek) in gs.iter_mut().zip(es) {
                    crate::linalg::axpy(self.gamma_reg, &ek, gk);
                }
            }
        }
        g
    }

    /// Cost on the unfloored maps, the number reported when scoring.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let scene = self.head.maps_from_state(x)?;
        let rows = scene_rows(&scene);
        Ok(self.rows_value(&rows))
    }
}

impl StateCost for SceneCost {
    fn dim(&self) -> usize {
        self.head.state_dim()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let fwd = self.head.forward(x)?;
        let rows = fwd.floored_rows();
        Ok(self.rows_value(&rows))
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let fwd = self.head.forward(x)?;
        let rows = fwd.floored_rows();
        let g = self.rows_grad(&rows);
        Ok(self.head.backward(&fwd, &g))
    }
}

/// Exact gradient of `kind` composed with `head` at `x`.
pub fn grad_cost_state(head: &MapHead, kind: CostKind, x: &[f64]) -> Result<Vec<f64>> {
    SceneCost::new(head.clone(), kind).grad(x)
}
