//! The five subcommands. Each takes a fully resolved [`RunConfig`] and an
//! output directory, so they can be driven without going through argv.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, ScheduleSpec, Sweep};
use super::{run_pool, worker_threads, Manifest};
use crate::control::{apply_control_inference, controlled_memoryless_sde, finetune_adjoint_matching_with, ControlNet};
use crate::costs::pgm::save_pgm;
use crate::costs::{cosine_separation_cost, entropy_regularizer, focus_cost, MapHead, SceneCost, SceneSpec};
use crate::error::{Error, Result};
use crate::field::checkpoint::{self, CheckpointKind};
use crate::field::{smooth, train_cfm, VectorFieldNet, VelocityField};
use crate::metrics::{composite_score, CompositeScore, MetricRecord, MetricReport, Summary};
use crate::sampler::{sample_controlled_ode, sample_controlled_sde, source_samples, SampleMode, Trajectory};
use crate::schedules::{vp_to_fm_schedule, DiffusionSchedule, InterpolantSchedule, VpRateTable};

pub const FIELD_FILE: &str = "field.fctl";
pub const CONTROL_FILE: &str = "control.fctl";
pub const REPORT_FILE: &str = "report.json";
pub const SCHEDULE_FILE: &str = "schedule.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn write_run_files(dir: &Path, cfg: &RunConfig, command: &str, children: Vec<String>, artifacts: Vec<String>) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.normalized().to_toml())?;
    let manifest = Manifest::new(command, cfg, children, artifacts);
    write_text(&dir.join("manifest.json"), &manifest.to_json())
}

/// Child directory name for one value of a sweep.
pub fn child_name(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

fn write_curve(path: &Path, header: &str, losses: &[f64], smoothed: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{header},loss,smoothed")?;
    for (i, (l, s)) in losses.iter().zip(smoothed).enumerate() {
        writeln!(w, "{},{l:?},{s:?}", i + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_field(path: &Path, dim: usize) -> Result<VectorFieldNet> {
    let (kind, mlp) = checkpoint::load(path)?;
    if kind != CheckpointKind::VectorField {
        return Err(Error::Checkpoint(format!("{} holds a control net, not a vector field", path.display())));
    }
    let field = VectorFieldNet::from_mlp(mlp)?;
    if field.dim() != dim {
        return Err(Error::Config(format!("checkpoint {} has state dimension {}, config has {dim}", path.display(), field.dim())));
    }
    Ok(field)
}

pub fn load_control(path: &Path, dim: usize) -> Result<ControlNet> {
    let (kind, mlp) = checkpoint::load(path)?;
    if kind != CheckpointKind::Control {
        return Err(Error::Checkpoint(format!("{} does not hold a control net", path.display())));
    }
    let control = ControlNet::from_mlp(mlp)?;
    if control.dim() != dim {
        return Err(Error::Config(format!("control {} has state dimension {}, config has {dim}", path.display(), control.dim())));
    }
    Ok(control)
}

fn field_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.field.checkpoint.clone().unwrap_or_else(|| out.join(FIELD_FILE))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub final_smoothed_loss: f64,
    pub converged: bool,
}

/// Fit the base field; writes the checkpoint and `loss.csv`.
pub fn train(cfg: &RunConfig, out: &Path, checkpoint_out: Option<&Path>) -> Result<TrainOutcome> {
    create_dir(out)?;
    let sched = cfg.schedule.build()?;
    let mut field = VectorFieldNet::seeded(cfg.dim(), &cfg.field.hidden, cfg.field.seed)?;
    let report = train_cfm(&mut field, &sched, &cfg.target, &cfg.train)?;
    let ckpt = checkpoint_out.map(Path::to_path_buf).unwrap_or_else(|| out.join(FIELD_FILE));
    checkpoint::save(&ckpt, CheckpointKind::VectorField, field.mlp())?;
    let smoothed = smooth(&report.losses, cfg.train.smoothing_window);
    write_curve(&out.join("loss.csv"), "step", &report.losses, &smoothed)?;
    write_run_files(out, cfg, "train", vec![], vec![ckpt.display().to_string(), "loss.csv".into()])?;
    Ok(TrainOutcome { checkpoint: ckpt, final_smoothed_loss: report.final_smoothed_loss, converged: report.converged })
}

/// The scenes a sample run is scored on: the training scene, then `eval_scenes`.
pub fn scene_costs(cfg: &RunConfig) -> Result<Vec<(String, SceneCost)>> {
    let mut scenes = vec![("train".to_string(), &cfg.cost.scene)];
    scenes.extend(cfg.cost.eval_scenes.iter().enumerate().map(|(i, s)| (format!("eval{}", i + 1), s)));
    scenes
        .into_iter()
        .map(|(name, spec): (String, &SceneSpec)| {
            let head = MapHead::from_spec(spec, cfg.dim())?;
            let cost = SceneCost { head, kind: cfg.cost.kind, gamma_reg: cfg.cost.gamma_reg };
            Ok((name, cost))
        })
        .collect()
}

/// Larger-is-better scores of one endpoint under one scene.
pub fn endpoint_metrics(head: &MapHead, x: &[f64]) -> Result<BTreeMap<String, f64>> {
    let maps = head.maps_from_state(x)?;
    let mut m = BTreeMap::new();
    m.insert("focus_score".to_string(), 1.0 - focus_cost(&maps)?);
    m.insert("cosine_score".to_string(), 1.0 - cosine_separation_cost(&maps)?);
    m.insert("entropy_score".to_string(), 1.0 - entropy_regularizer(&maps, 1.0));
    Ok(m)
}

struct SampleContext<'a> {
    cfg: &'a RunConfig,
    sched: InterpolantSchedule,
    field: VectorFieldNet,
    control: Option<ControlNet>,
    scenes: Vec<(String, SceneCost)>,
}

impl SampleContext<'_> {
    fn trajectory(&self, lambda: f64, seed: u64) -> Result<Trajectory> {
        let sampler = self.cfg.sampler.build();
        let x0 = source_samples(self.cfg.dim(), 1, seed).remove(0);
        let cost = &self.scenes[0].1;
        match (&self.control, sampler.mode) {
            (None, SampleMode::Ode) => sample_controlled_ode(&self.field, &self.sched, &sampler, cost, lambda, &x0),
            (None, SampleMode::Sde) => sample_controlled_sde(&self.field, &self.sched, &sampler, cost, lambda, &x0, seed),
            (Some(c), SampleMode::Ode) => apply_control_inference(&self.field, c, &self.sched, &sampler, &x0),
            (Some(c), SampleMode::Sde) => controlled_memoryless_sde(&self.field, c, &self.sched, &sampler, &x0, seed),
        }
    }

    fn run_child(&self, cfg: &RunConfig, lambda: f64, dir: &Path) -> Result<MetricReport> {
        create_dir(dir)?;
        create_dir(&dir.join("maps"))?;
        let hash = cfg.hash();
        let mut report = MetricReport::new();
        let mut endpoints = BufWriter::new(fs::File::create(dir.join("endpoints.csv"))?);
        write!(endpoints, "seed")?;
        for k in 0..cfg.dim() {
            write!(endpoints, ",x_{k}")?;
        }
        writeln!(endpoints)?;
        let mut artifacts = vec!["endpoints.csv".to_string(), REPORT_FILE.to_string(), "report.csv".to_string()];
        for &seed in &cfg.seeds {
            let traj = self.trajectory(lambda, seed)?;
            let stem = format!("traj_seed{seed}");
            traj.save(&dir.join(format!("{stem}.ftrj")))?;
            let mut csv = BufWriter::new(fs::File::create(dir.join(format!("{stem}.csv")))?);
            traj.write_csv(&mut csv)?;
            csv.flush()?;
            artifacts.push(format!("{stem}.ftrj"));
            artifacts.push(format!("{stem}.csv"));
            let x = traj.endpoint();
            write!(endpoints, "{seed}")?;
            for v in x {
                write!(endpoints, ",{v:?}")?;
            }
            writeln!(endpoints)?;
            for (j, subject) in self.scenes[0].1.head.maps_from_state(x)?.iter().enumerate() {
                let name = format!("maps/seed{seed}_subject{j}.pgm");
                save_pgm(subject.mean_map(), &dir.join(&name))?;
                artifacts.push(name);
            }
            for (scene_id, cost) in &self.scenes {
                report.push(MetricRecord {
                    config_hash: hash.clone(),
                    scene_id: scene_id.clone(),
                    seed,
                    metrics: endpoint_metrics(&cost.head, x)?,
                })?;
            }
        }
        endpoints.flush()?;
        write_text(&dir.join(REPORT_FILE), &report.to_json())?;
        let mut csv = BufWriter::new(fs::File::create(dir.join("report.csv"))?);
        report.write_csv(&mut csv)?;
        csv.flush()?;
        write_run_files(dir, cfg, "sample", vec![], artifacts)?;
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub lambda: f64,
    pub dir: PathBuf,
    pub report: MetricReport,
}

impl SampleOutcome {
    /// Mean of one metric over the records of one scene.
    pub fn mean(&self, scene: &str, metric: &str) -> Option<f64> {
        let vals: Vec<f64> =
            self.report.records.iter().filter(|r| r.scene_id == scene).filter_map(|r| r.metrics.get(metric).copied()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Expand a sweep into `(value, directory)` pairs. A single value runs in
/// `out` itself; lists get one `lambda_<v>` child each.
fn expand(sweep: &Sweep, out: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let values = sweep.values();
    if values.is_empty() {
        return Err(Error::Config("lambda list must not be empty".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Config(format!("lambda must be finite and nonnegative, got {bad}")));
    }
    let mut names: Vec<String> = values.iter().map(|v| child_name(*v)).collect();
    names.sort();
    names.dedup();
    if names.len() != values.len() {
        return Err(Error::Config("lambda list contains duplicates".into()));
    }
    Ok(match sweep {
        Sweep::One(v) => vec![(*v, out.to_path_buf())],
        Sweep::Many(vs) => vs.iter().map(|v| (*v, out.join(child_name(*v)))).collect(),
    })
}

/// Sample every seed for every test-time `lambda`.
pub fn sample(cfg: &RunConfig, out: &Path) -> Result<Vec<SampleOutcome>> {
    create_dir(out)?;
    let sched = cfg.schedule.build()?;
    let field = load_field(&field_path(cfg, out), cfg.dim())?;
    let control = cfg.sampler.control.as_deref().map(|p| load_control(p, cfg.dim())).transpose()?;
    let jobs = expand(&cfg.cost.lambda, out)?;
    if control.is_some() && jobs.iter().any(|(l, _)| *l != 0.0) {
        return Err(Error::Config("a learned control cannot be combined with test-time lambda > 0".into()));
    }
    if control.is_some() && cfg.sampler.build().mode == SampleMode::Sde && cfg.sampler.build().diffusion != DiffusionSchedule::Memoryless {
        return Err(Error::Config("a learned control samples with the memoryless SDE or the ODE".into()));
    }
    let ctx = SampleContext { cfg, sched, field, control, scenes: scene_costs(cfg)? };
    let reports = run_pool(jobs.len(), worker_threads()?, |i| {
        let (lambda, dir) = &jobs[i];
        let child = RunConfig { cost: super::config::CostSpec { lambda: Sweep::One(*lambda), ..cfg.cost.clone() }, ..cfg.clone() };
        ctx.run_child(&child, *lambda, dir)
    })?;
    if matches!(cfg.cost.lambda, Sweep::Many(_)) {
        let children = jobs.iter().map(|(l, _)| child_name(*l)).collect();
        write_run_files(out, cfg, "sample", children, vec![])?;
    }
    Ok(jobs.into_iter().zip(reports).map(|((lambda, dir), report)| SampleOutcome { lambda, dir, report }).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub lambda: f64,
    pub checkpoint: PathBuf,
    pub final_smoothed_loss: f64,
    pub base_checksum: String,
}

/// Fine-tune one control per `finetune.lambda` with Adjoint Matching.
pub fn finetune(cfg: &RunConfig, out: &Path, checkpoint_out: Option<&Path>) -> Result<Vec<FinetuneOutcome>> {
    create_dir(out)?;
    let sched = cfg.schedule.build()?;
    let field = load_field(&field_path(cfg, out), cfg.dim())?;
    let scene = scene_costs(cfg)?.remove(0).1;
    let jobs = expand(&cfg.finetune.lambda, out)?;
    if checkpoint_out.is_some() && jobs.len() > 1 {
        return Err(Error::Config("--checkpoint-out needs a single lambda".into()));
    }
    let outcomes = run_pool(jobs.len(), worker_threads()?, |i| {
        let (lambda, dir) = &jobs[i];
        create_dir(dir)?;
        let mut child = cfg.clone();
        child.finetune.lambda = Sweep::One(*lambda);
        child.finetune.am.lambda = *lambda;
        let am = &child.finetune.am;
        let mut artifacts = vec![];
        let mut on_ckpt = |it: usize, net: &ControlNet| -> Result<()> {
            let name = format!("control_iter{it}.fctl");
            checkpoint::save(&dir.join(&name), CheckpointKind::Control, net.mlp())?;
            artifacts.push(name);
            Ok(())
        };
        let (control, report) = finetune_adjoint_matching_with(&field, &sched, &scene, am, child.finetune.seed, &mut on_ckpt)?;
        let ckpt = checkpoint_out.map(Path::to_path_buf).unwrap_or_else(|| dir.join(CONTROL_FILE));
        checkpoint::save(&ckpt, CheckpointKind::Control, control.mlp())?;
        write_curve(&dir.join("am_loss.csv"), "iteration", &report.losses, &report.smoothed)?;
        artifacts.push(ckpt.display().to_string());
        artifacts.push("am_loss.csv".into());
        write_run_files(dir, &child, "finetune", vec![], artifacts)?;
        Ok(FinetuneOutcome {
            lambda: *lambda,
            checkpoint: ckpt,
            final_smoothed_loss: report.smoothed.last().copied().unwrap_or(f64::NAN),
            base_checksum: report.base_checksum,
        })
    })?;
    if matches!(cfg.finetune.lambda, Sweep::Many(_)) {
        let children = jobs.iter().map(|(l, _)| child_name(*l)).collect();
        write_run_files(out, cfg, "finetune", children, vec![])?;
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub run: String,
    pub composite: f64,
    pub skipped: usize,
    pub summary: BTreeMap<String, Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub base: String,
    /// Sorted by composite, best first.
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn render(&self) -> String {
        let mut s = format!("base: {}\n{:>4}  {:>10}  {:>7}  run\n", self.base, "rank", "composite", "skipped");
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&format!("{:>4}  {:>10.4}  {:>7}  {}\n", i + 1, r.composite, r.skipped, r.run));
        }
        s
    }
}

/// A run is either a directory holding `report.json` or the report itself.
pub fn load_report(run: &Path) -> Result<MetricReport> {
    let path = if run.is_dir() { run.join(REPORT_FILE) } else { run.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
        _ => Error::Io(e),
    })?;
    MetricReport::from_json(&text)
}

/// Composite score of each candidate against `base`.
pub fn eval(base: &Path, candidates: &[PathBuf], out: Option<&Path>) -> Result<EvalTable> {
    let base_report = load_report(base)?;
    let mut rows = Vec::with_capacity(candidates.len());
    for c in candidates {
        let report = load_report(c)?;
        let CompositeScore { score, skipped } = composite_score(&report, &base_report).map_err(|e| match e {
            Error::KeyMismatch(m) => Error::KeyMismatch(format!("{}: {m}", c.display())),
            other => other,
        })?;
        rows.push(EvalRow { run: c.display().to_string(), composite: score, skipped, summary: report.summary() });
    }
    rows.sort_by(|a, b| b.composite.total_cmp(&a.composite).then_with(|| a.run.cmp(&b.run)));
    let table = EvalTable { base: base.display().to_string(), rows };
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("eval.json"), &serde_json::to_string_pretty(&table).expect("tables serialize"))?;
    }
    Ok(table)
}

/// Tabulated FM schedule obtained from a VP chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTable {
    pub kind: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub betas: Vec<f64>,
    pub t: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha_dot: Vec<f64>,
    pub beta_dot: Vec<f64>,
}

/// Resolution of the emitted time grid.
pub const TABLE_POINTS: usize = 200;

impl ScheduleTable {
    pub fn tabulate(betas: &[f64], sched: &InterpolantSchedule) -> Self {
        // beta_dot diverges at t = 1 for VP chains, so the grid stops one cell short.
        let t: Vec<f64> = (0..TABLE_POINTS).map(|i| i as f64 / TABLE_POINTS as f64).collect();
        Self {
            kind: "vp_to_fm".into(),
            k: betas.len(),
            betas: betas.to_vec(),
            alpha: t.iter().map(|&s| sched.alpha(s)).collect(),
            beta: t.iter().map(|&s| sched.beta(s)).collect(),
            alpha_dot: t.iter().map(|&s| sched.alpha_dot(s)).collect(),
            beta_dot: t.iter().map(|&s| sched.beta_dot(s)).collect(),
            t,
        }
    }

    /// Rebuild the schedule from `betas` and check it reproduces the table.
    pub fn schedule(&self) -> Result<InterpolantSchedule> {
        if self.kind != "vp_to_fm" || self.k != self.betas.len() {
            return Err(Error::Integrity("schedule table header does not match its contents".into()));
        }
        let sched = vp_to_fm_schedule(&VpRateTable::from_betas(self.betas.clone())?)?;
        let fresh = Self::tabulate(&self.betas, &sched);
        let cols = [
            (&self.t, &fresh.t),
            (&self.alpha, &fresh.alpha),
            (&self.beta, &fresh.beta),
            (&self.alpha_dot, &fresh.alpha_dot),
            (&self.beta_dot, &fresh.beta_dot),
        ];
        for (stored, computed) in cols {
            if stored.len() != computed.len() || stored.iter().zip(computed).any(|(a, b)| (a - b).abs() > 1e-12) {
                return Err(Error::Integrity("schedule table does not match its betas".into()));
            }
        }
        Ok(sched)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tables serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
    }
}

/// Convert the configured VP chain into a tabulated FM schedule.
pub fn convert_vp(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, ScheduleTable)> {
    let ScheduleSpec::Vp { k, beta_min, beta_max } = cfg.schedule else {
        return Err(Error::Config("convert-vp needs `schedule = { vp = { ... } }`".into()));
    };
    let table = VpRateTable::linear(k, beta_min, beta_max)?;
    let sched = vp_to_fm_schedule(&table)?;
    let emitted = ScheduleTable::tabulate(table.betas(), &sched);
    create_dir(out)?;
    let path = out.join(SCHEDULE_FILE);
    write_text(&path, &emitted.to_json())?;
    write_run_files(out, cfg, "convert-vp", vec![], vec![SCHEDULE_FILE.into()])?;
    Ok((path, emitted))
}
