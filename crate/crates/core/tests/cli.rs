//! End-to-end runs of the `flowctl` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use flowctl::cli::commands::ScheduleTable;
use flowctl::cli::{Manifest, RunConfig};
use flowctl::field::checkpoint::{self, params_checksum};
use flowctl::field::{cfm_loss, EndpointPair, GaussianPathField, ToyTarget, VectorFieldNet, VelocityField};
use flowctl::metrics::MetricReport;
use flowctl::rng::{gaussian_vec, rng_from_seed};
use flowctl::schedules::InterpolantSchedule;
use rand::Rng;
use tempfile::TempDir;

fn flowctl(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowctl"));
    cmd.args(args).env_remove("FLOWCTL_THREADS");
    if let Some(n) = threads {
        cmd.env("FLOWCTL_THREADS", n.to_string());
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A mixture field trained once per test process.
fn mixture_field() -> &'static Path {
    static FIELD: OnceLock<PathBuf> = OnceLock::new();
    FIELD.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_mixture");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let cfg = write_config(&dir, "train.toml", "[train]\nsteps = 1500\n");
        ok(&flowctl(&["train", "--config", s(&cfg), "--out", s(&dir)], None));
        dir.join("field.fctl")
    })
}

/// Every file below `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn mean_focus_cost(run: &Path, scene: &str) -> f64 {
    let report = MetricReport::from_json(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let v: Vec<f64> = report.records.iter().filter(|r| r.scene_id == scene).map(|r| 1.0 - r.metrics["focus_score"]).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn per_seed_focus_cost(run: &Path) -> BTreeMap<u64, f64> {
    let report = MetricReport::from_json(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    report.records.iter().filter(|r| r.scene_id == "train").map(|r| (r.seed, 1.0 - r.metrics["focus_score"])).collect()
}

/// One-sided sign test: P(at least `wins` successes of `n` fair coin flips).
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    for k in wins..=n {
        let mut c = 1.0;
        for i in 0..k {
            c *= (n - i) as f64 / (i + 1) as f64;
        }
        p += c * 0.5f64.powi(n as i32);
    }
    p
}

#[test]
fn train_reaches_the_gaussian_oracle_loss() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "run.toml",
        "[target.gaussian]\nmean = [1.0, -0.5]\nstd = 0.5\n[train]\nsteps = 1500\nsmoothing_window = 200\n",
    );
    let out = tmp.path().join("run");
    ok(&flowctl(&["train", "--config", s(&cfg), "--out", s(&out)], None));
    assert!(out.join("field.fctl").exists());

    // Irreducible CFM loss: the exact marginal velocity's loss on a large batch.
    let sched = InterpolantSchedule::RectifiedFlow;
    let exact = GaussianPathField { sched: sched.clone(), mean: vec![1.0, -0.5], std: 0.5 };
    let target = ToyTarget::Gaussian { mean: vec![1.0, -0.5], std: 0.5 };
    let mut rng = rng_from_seed(99);
    let n = 200_000;
    let mut floor = 0.0;
    for _ in 0..n {
        let pair = EndpointPair { x0: gaussian_vec(&mut rng, 2), x1: target.sample(&mut rng) };
        let t: f64 = rng.random();
        let x = flowctl::field::interpolate(&sched, &pair, t);
        let u = flowctl::field::conditional_velocity(&sched, &pair, t);
        let v = exact.velocity(&x, t);
        floor += v.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
    }
    let curve = fs::read_to_string(out.join("loss.csv")).unwrap();
    let last = curve.lines().last().unwrap();
    let smoothed: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert!(smoothed < floor + 0.05, "smoothed loss {smoothed}, oracle floor {floor}");

    // Paired on a fresh batch: excess over the exact field's loss on the same draws.
    let (_, mlp) = checkpoint::load(&out.join("field.fctl")).unwrap();
    let trained = VectorFieldNet::from_mlp(mlp).unwrap();
    let m = 20_000;
    let batch: Vec<EndpointPair> = (0..m).map(|_| EndpointPair { x0: gaussian_vec(&mut rng, 2), x1: target.sample(&mut rng) }).collect();
    let times: Vec<f64> = (0..m).map(|_| rng.random()).collect();
    let (loss, _) = cfm_loss(&trained, &sched, &batch, &times).unwrap();
    let exact_loss: f64 = batch
        .iter()
        .zip(&times)
        .map(|(pair, &t)| {
            let v = exact.velocity(&flowctl::field::interpolate(&sched, pair, t), t);
            let u = flowctl::field::conditional_velocity(&sched, pair, t);
            v.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum::<f64>()
        / m as f64;
    assert!(loss - exact_loss < 0.05, "held-out loss {loss}, exact field {exact_loss}");
}

#[test]
fn zero_training_steps_keep_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", "[train]\nsteps = 0\n[field]\nhidden = [8, 8]\nseed = 5\n");
    ok(&flowctl(&["train", "--config", s(&cfg), "--out", s(tmp.path())], None));
    let (_, mlp) = checkpoint::load(&tmp.path().join("field.fctl")).unwrap();
    let init = VectorFieldNet::seeded(2, &[8, 8], 5).unwrap();
    assert_eq!(mlp.params(), init.params());
}

#[test]
fn malformed_config_exits_2_with_a_line_number() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "seeds = [0]\n[train]\nsteps = \"many\"\n");
    let out = flowctl(&["train", "--config", s(&cfg), "--out", s(tmp.path())], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");

    let unknown = write_config(tmp.path(), "unknown.toml", "[sampler]\nstep = 10\n");
    let out = flowctl(&["sample", "--config", s(&unknown), "--out", s(tmp.path())], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn divergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", "[train]\nsteps = 5\ndivergence_threshold = 1e-9\n");
    let out = flowctl(&["train", "--config", s(&cfg), "--out", s(tmp.path())], None);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sampling_is_deterministic_and_writes_one_trajectory_per_seed() {
    let field = mixture_field();
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &format!("[field]\ncheckpoint = {:?}\n", s(field)));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&flowctl(&["sample", "--config", s(&cfg), "--out", s(dir), "--mode", "ode", "--lambda", "0", "--seed", "7"], None));
    }
    assert_eq!(snapshot(&a), snapshot(&b));

    let five = tmp.path().join("five");
    ok(&flowctl(&["sample", "--config", s(&cfg), "--out", s(&five)], None));
    let trajs: Vec<_> = (0..5).map(|i| five.join(format!("traj_seed{i}.ftrj"))).collect();
    assert!(trajs.iter().all(|p| p.exists()));
    let ftrj = fs::read_dir(&five).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ftrj")).count();
    assert_eq!(ftrj, 5);
    assert_eq!(fs::read_to_string(five.join("endpoints.csv")).unwrap().lines().count(), 6);
    assert!(five.join("maps/seed0_subject1.pgm").exists());
}

#[test]
fn sweeps_do_not_depend_on_the_thread_count() {
    let field = mixture_field();
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "run.toml",
        &format!("seeds = [0, 1, 2]\n[field]\ncheckpoint = {:?}\n[sampler]\nmode = \"sde\"\n[cost]\nlambda = [0.0, 0.01, 0.1]\n", s(field)),
    );
    let (one, three) = (tmp.path().join("one"), tmp.path().join("three"));
    ok(&flowctl(&["sample", "--config", s(&cfg), "--out", s(&one)], Some(1)));
    ok(&flowctl(&["sample", "--config", s(&cfg), "--out", s(&three)], Some(3)));
    let snap = snapshot(&one);
    assert_eq!(snap, snapshot(&three));
    assert!(snap.keys().any(|k| k.starts_with("lambda_0.01")));
    let manifest = Manifest::load(&one.join("manifest.json")).unwrap();
    assert_eq!(manifest.children, ["lambda_0", "lambda_0.01", "lambda_0.1"]);

    let bad = flowctl(&["sample", "--config", s(&cfg), "--out", s(&one)], None);
    ok(&bad);
    let out = Command::new(env!("CARGO_BIN_EXE_flowctl"))
        .args(["sample", "--config", s(&cfg), "--out", s(&one)])
        .env("FLOWCTL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn lambda_sweep_lowers_focus_until_over_control() {
    let field = mixture_field();
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "run.toml",
        &format!("seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15]\n[field]\ncheckpoint = {:?}\n", s(field)),
    );
    let grid = [0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 8.0, 12.0, 16.0, 32.0];
    let list = grid.map(|v| v.to_string()).join(",");
    let out = tmp.path().join("sweep");
    ok(&flowctl(&["sample", "--config", s(&cfg), "--out", s(&out), "--lambda", &format!("0,{list}")], None));
    let base = mean_focus_cost(&out.join("lambda_0"), "train");
    let costs: Vec<f64> = grid.iter().map(|v| mean_focus_cost(&out.join(format!("lambda_{v}")), "train")).collect();
    assert_eq!(costs.len(), 10);
    // Over-control starts at the first increase. Before it the sweep must be
    // nonincreasing (by construction of the cut) and must already have
    // driven the cost far below base; the first few values must not reverse.
    let series: Vec<f64> = std::iter::once(base).chain(costs.iter().copied()).collect();
    let reversal = series.windows(2).position(|w| w[1] > w[0]).map_or(series.len(), |i| i + 1);
    assert!(reversal >= 4, "reversal at lambda {} (base {base}, sweep {costs:?})", grid[reversal - 2]);
    assert!(series[reversal - 1] < 0.1 * base, "base {base}, sweep {costs:?}");
}

#[test]
fn missing_checkpoint_exits_4() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", "seeds = [0]\n");
    let out = flowctl(&["sample", "--config", s(&cfg), "--out", s(tmp.path())], None);
    assert_eq!(out.status.code(), Some(4));
    let out = flowctl(&["finetune", "--config", s(&cfg), "--out", s(tmp.path())], None);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn zero_lambda_finetune_learns_no_control() {
    let field = mixture_field();
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &format!("[field]\ncheckpoint = {:?}\n", s(field)));
    ok(&flowctl(&["finetune", "--config", s(&cfg), "--out", s(tmp.path()), "--lambda", "0", "--steps", "50"], None));
    let control = flowctl::cli::commands::load_control(&tmp.path().join("control.fctl"), 2).unwrap();
    let mut rng = rng_from_seed(0);
    let probes: Vec<(Vec<f64>, f64)> = (0..256).map(|_| (gaussian_vec(&mut rng, 2), rng.random())).collect();
    assert!(flowctl::control::mean_control_energy(&control, &probes) < 1e-20);
}

#[test]
fn finetuned_control_improves_held_out_focus() {
    let field = mixture_field();
    let before = fs::read(field).unwrap();
    let tmp = TempDir::new().unwrap();
    let seeds: Vec<String> = (100..164).map(|v| v.to_string()).collect();
    let cfg = write_config(tmp.path(), "run.toml", &format!("seeds = [{}]\n[field]\ncheckpoint = {:?}\n", seeds.join(", "), s(field)));
    let ft = tmp.path().join("ft");
    ok(&flowctl(&["finetune", "--config", s(&cfg), "--out", s(&ft)], None));
    assert_eq!(fs::read(field).unwrap(), before, "base checkpoint changed");
    let base = tmp.path().join("base");
    let tuned = tmp.path().join("tuned");
    ok(&flowctl(&["sample", "--config", s(&cfg), "--out", s(&base)], None));
    ok(&flowctl(&["sample", "--config", s(&cfg), "--out", s(&tuned), "--control-in", s(&ft.join("control.fctl"))], None));
    let (b, t) = (per_seed_focus_cost(&base), per_seed_focus_cost(&tuned));
    let wins = b.iter().filter(|(seed, v)| t[*seed] < **v).count();
    let p = sign_test_p(wins, b.len());
    assert!(p < 0.05, "{wins}/{} paired wins, p = {p}", b.len());
    assert!(mean_focus_cost(&tuned, "train") < mean_focus_cost(&base, "train"));

    let manifest = Manifest::load(&ft.join("manifest.json")).unwrap();
    assert_eq!(manifest.command, "finetune");
    let (_, mlp) = checkpoint::load(field).unwrap();
    let stdout =
        String::from_utf8_lossy(&flowctl(&["finetune", "--config", s(&cfg), "--out", s(&ft), "--steps", "1"], None).stdout).to_string();
    assert!(stdout.contains(&params_checksum(mlp.params())[..12]), "{stdout}");
}

#[test]
fn eval_ranks_candidates_and_rejects_missing_seeds() {
    let field = mixture_field();
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "run.toml",
        &format!("seeds = [0, 1, 2, 3]\n[field]\ncheckpoint = {:?}\n[cost]\nlambda = [0.0, 0.01, 0.003]\n", s(field)),
    );
    let runs = tmp.path().join("runs");
    ok(&flowctl(&["sample", "--config", s(&cfg), "--out", s(&runs)], None));
    let base = runs.join("lambda_0");

    let out = flowctl(&["eval", "--base", s(&base), "--candidate", s(&base)], None);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("    0.0000"), "{text}");

    let (c1, c2) = (runs.join("lambda_0.003"), runs.join("lambda_0.01"));
    let eval_dir = tmp.path().join("eval");
    ok(&flowctl(&["eval", "--base", s(&base), "--candidate", s(&c1), s(&c2), "--out", s(&eval_dir)], None));
    let table: flowctl::cli::commands::EvalTable = serde_json::from_str(&fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert!(table.rows[0].composite >= table.rows[1].composite);

    let short = tmp.path().join("short");
    ok(&flowctl(&["sample", "--config", s(&cfg), "--out", s(&short), "--lambda", "0", "--seed", "0"], None));
    let out = flowctl(&["eval", "--base", s(&base), "--candidate", s(&short)], None);
    assert_eq!(out.status.code(), Some(6));
    let out = flowctl(&["eval", "--base", s(&base), "--candidate", s(&tmp.path().join("nowhere"))], None);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn convert_vp_emits_a_reloadable_schedule() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "vp.toml", "schedule = { vp = { K = 1000, beta_min = 1e-4, beta_max = 2e-2 } }\n");
    ok(&flowctl(&["convert-vp", "--config", s(&cfg), "--out", s(tmp.path())], None));
    let table = ScheduleTable::load(&tmp.path().join("schedule.json")).unwrap();
    let sched = table.schedule().unwrap();
    let expect = RunConfig::from_toml(&fs::read_to_string(&cfg).unwrap()).unwrap().schedule.build().unwrap();
    assert_eq!(sched, expect);
    for (i, &t) in table.t.iter().enumerate() {
        assert!((table.alpha[i] - expect.alpha(t)).abs() <= 1e-12);
        assert!((table.beta_dot[i] - expect.beta_dot(t)).abs() <= 1e-12);
        // Variance preserving, with alpha rising and beta falling.
        assert!((table.alpha[i].powi(2) + table.beta[i].powi(2) - 1.0).abs() < 1e-12);
        assert!(table.alpha_dot[i] > 0.0 && table.beta_dot[i] < 0.0);
    }
    assert!(table.alpha.windows(2).all(|w| w[1] > w[0]));
    assert!((sched.alpha(1.0) - 1.0).abs() < 1e-6);
    assert!(sched.alpha(0.0) < 0.1);

    let mut tampered = table.clone();
    tampered.alpha[10] += 1e-9;
    assert!(tampered.schedule().is_err());

    let degenerate = write_config(tmp.path(), "k1.toml", "schedule = { vp = { K = 1, beta_min = 1e-4, beta_max = 2e-2 } }\n");
    let out = flowctl(&["convert-vp", "--config", s(&degenerate), "--out", s(tmp.path())], None);
    assert_eq!(out.status.code(), Some(2));
    let rf = write_config(tmp.path(), "rf.toml", "schedule = \"rectified_flow\"\n");
    assert_eq!(flowctl(&["convert-vp", "--config", s(&rf), "--out", s(tmp.path())], None).status.code(), Some(2));
}

#[test]
fn manifests_hash_the_effective_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", "[train]\nsteps = 0\n");
    let out = tmp.path().join("run");
    ok(&flowctl(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "3"], None));
    let saved = RunConfig::from_toml(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved.train.seed, 3);
    let manifest = Manifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.config_hash, saved.hash());
    assert_eq!(manifest.version, env!("CARGO_PKG_VERSION"));
    let text = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(!text.contains("time"));
}
