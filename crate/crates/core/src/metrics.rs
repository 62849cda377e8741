//! Reports, the composite relative-improvement score, Elo ratings, cost
//! integrals and energy distance.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dist, norm_sq};
use crate::sampler::Trajectory;

/// Metric values for one `(config, scene, seed)`. Larger is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub config_hash: String,
    pub scene_id: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        let dup =
            self.records.iter().any(|r| r.config_hash == record.config_hash && r.scene_id == record.scene_id && r.seed == record.seed);
        if dup {
            return Err(Error::KeyMismatch(format!("duplicate record for scene `{}` seed {}", record.scene_id, record.seed)));
        }
        self.records.push(record);
        Ok(())
    }

    /// `(scene, seed, metric) -> value`.
    fn keyed(&self) -> BTreeMap<(String, u64, String), f64> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            for (m, v) in &r.metrics {
                out.insert((r.scene_id.clone(), r.seed, m.clone()), *v);
            }
        }
        out
    }

    /// Mean and sample standard deviation of each metric over all records.
    pub fn summary(&self) -> BTreeMap<String, Summary> {
        let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            for (m, v) in &r.metrics {
                cols.entry(m.clone()).or_default().push(*v);
            }
        }
        cols.into_iter()
            .map(|(m, vs)| {
                let n = vs.len();
                let mean = vs.iter().sum::<f64>() / n as f64;
                let var = if n > 1 { vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
                (m, Summary { mean, std: var.sqrt(), count: n })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Integrity(format!("metric report: {e}")))
    }

    /// One row per record: `config_hash,scene_id,seed,<metrics...>`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let names: BTreeSet<&String> = self.records.iter().flat_map(|r| r.metrics.keys()).collect();
        write!(w, "config_hash,scene_id,seed")?;
        for n in &names {
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
        for r in &self.records {
            write!(w, "{},{},{}", r.config_hash, r.scene_id, r.seed)?;
            for n in &names {
                match r.metrics.get(*n) {
                    Some(v) => write!(w, ",{v:?}")?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompositeScore {
    pub score: f64,
    /// Keys left out because the base value was within `1e-12` of zero.
    pub skipped: usize,
}

const BASE_EPS: f64 = 1e-12;

/// Macro-averaged relative improvement over `base`: mean over scenes of the
/// mean over seeds of the mean over metrics of `(m - m_base) / m_base`.
pub fn composite_score(current: &MetricReport, base: &MetricReport) -> Result<CompositeScore> {
    let cur = current.keyed();
    let bas = base.keyed();
    let cur_keys: BTreeSet<_> = cur.keys().collect();
    let base_keys: BTreeSet<_> = bas.keys().collect();
    if cur_keys != base_keys {
        let missing = base_keys.difference(&cur_keys).next().or_else(|| cur_keys.difference(&base_keys).next());
        let (scene, seed, metric) = missing.expect("sets differ");
        return Err(Error::KeyMismatch(format!("key (scene `{scene}`, seed {seed}, metric `{metric}`) is not in both reports")));
    }
    let mut per_seed: BTreeMap<(&str, u64), Vec<f64>> = BTreeMap::new();
    let mut skipped = 0;
    for ((scene, seed, metric), b) in &bas {
        let c = cur[&(scene.clone(), *seed, metric.clone())];
        if b.abs() <= BASE_EPS {
            skipped += 1;
            continue;
        }
        per_seed.entry((scene.as_str(), *seed)).or_default().push((c - b) / b);
    }
    if per_seed.is_empty() {
        return Err(Error::DivisionByZero("every base value is zero".into()));
    }
    let mut per_scene: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ((scene, _), rel) in per_seed {
        per_scene.entry(scene).or_default().push(rel.iter().sum::<f64>() / rel.len() as f64);
    }
    let score = per_scene.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).sum::<f64>() / per_scene.len() as f64;
    Ok(CompositeScore { score, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    AWins,
    BWins,
    Draw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub a: String,
    pub b: String,
    pub outcome: Outcome,
}

pub const ELO_INITIAL: f64 = 1500.0;
pub const ELO_K: f64 = 32.0;

/// Expected score of a player rated `ra` against one rated `rb`.
pub fn expected_score(ra: f64, rb: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((rb - ra) / 400.0))
}

/// Elo ratings with the full match log. Matches are applied in log order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EloTable {
    pub ratings: BTreeMap<String, f64>,
    pub log: Vec<MatchRecord>,
}

impl EloTable {
    pub fn new<I, S>(candidates: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let ratings = candidates.into_iter().map(|c| (c.into(), ELO_INITIAL)).collect();
        Self { ratings, log: Vec::new() }
    }

    pub fn register(&mut self, name: &str) {
        self.ratings.entry(name.to_string()).or_insert(ELO_INITIAL);
    }

    pub fn rating(&self, name: &str) -> Result<f64> {
        self.ratings.get(name).copied().ok_or_else(|| Error::UnknownCandidate(name.to_string()))
    }

    pub fn total(&self) -> f64 {
        self.ratings.values().sum()
    }

    /// Writes the match log as JSON lines.
    pub fn write_log<W: Write>(&self, mut w: W) -> io::Result<()> {
        for m in &self.log {
            serde_json::to_writer(&mut w, m)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Apply one match with `K = 32`. The two rating changes cancel exactly in
/// exact arithmetic.
pub fn elo_update(table: &mut EloTable, a: &str, b: &str, outcome: Outcome) -> Result<()> {
    let ra = table.rating(a)?;
    let rb = table.rating(b)?;
    let ea = expected_score(ra, rb);
    let sa = match outcome {
        Outcome::AWins => 1.0,
        Outcome::BWins => 0.0,
        Outcome::Draw => 0.5,
    };
    let delta = ELO_K * (sa - ea);
    table.ratings.insert(a.to_string(), ra + delta);
    table.ratings.insert(b.to_string(), rb - delta);
    table.log.push(MatchRecord { a: a.to_string(), b: b.to_string(), outcome });
    Ok(())
}

/// Share of head-to-head wins, draws counting half.
pub fn win_rate(table: &EloTable, candidate: &str) -> Result<f64> {
    table.rating(candidate)?;
    let mut points = 0.0;
    let mut games = 0usize;
    for m in &table.log {
        let side = if m.a == candidate {
            Outcome::AWins
        } else if m.b == candidate {
            Outcome::BWins
        } else {
            continue;
        };
        games += 1;
        points += match m.outcome {
            Outcome::Draw => 0.5,
            o if o == side => 1.0,
            _ => 0.0,
        };
    }
    if games == 0 {
        return Err(Error::NoMatches(candidate.to_string()));
    }
    Ok(points / games as f64)
}

/// Left Riemann sum of `f(X_i, t_i) + 1/2 |u_i|^2` over the steps of `traj`.
/// `controls`, when given, holds one control value per step.
pub fn cost_integral(traj: &Trajectory, cost_fn: &dyn Fn(&[f64], f64) -> Result<f64>, controls: Option<&[Vec<f64>]>) -> Result<f64> {
    let n = traj.times.len();
    if n < 2 || traj.states.len() != n {
        return Err(Error::GridMismatch(format!("{n} times for {} states", traj.states.len())));
    }
    if let Some(u) = controls {
        if u.len() != n - 1 {
            return Err(Error::GridMismatch(format!("{} control values for {} steps", u.len(), n - 1)));
        }
    }
    let mut acc = 0.0;
    for i in 0..n - 1 {
        let dt = traj.times[i + 1] - traj.times[i];
        let mut f = cost_fn(&traj.states[i], traj.times[i])?;
        if let Some(u) = controls {
            f += 0.5 * norm_sq(&u[i]);
        }
        acc += dt * f;
    }
    Ok(acc)
}

fn mean_pair_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for x in a {
        let mut row = 0.0;
        for y in b {
            row += dist(x, y);
        }
        acc += row;
    }
    acc / (a.len() * b.len()) as f64
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` with all pairs
/// (V-statistic), which is nonnegative and exactly zero for identical
/// populations.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("energy distance needs nonempty populations".into()));
    }
    let d = a[0].len();
    for x in a.iter().chain(b) {
        check_dim(d, x.len())?;
    }
    if a == b {
        return Ok(0.0);
    }
    let v = 2.0 * mean_pair_dist(a, b) - mean_pair_dist(a, a) - mean_pair_dist(b, b);
    Ok(v.max(0.0))
}
