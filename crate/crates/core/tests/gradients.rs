//! Analytic gradients against central finite differences.

use flowctl::control::{am_loss, lean_adjoint_backward, ControlNet};
use flowctl::costs::{grad_cost_state, CostKind, MapHead, QuadraticCost, RunningCost, SceneCost, SceneSpec, StateCost, TimeWeight};
use flowctl::field::{cfm_loss, EndpointPair, ToyTarget, VectorFieldNet, VelocityField};
use flowctl::rng::{gaussian_vec, rng_from_seed};
use flowctl::sampler::{sample_sde, SamplerConfig};
use flowctl::schedules::{DiffusionSchedule, InterpolantSchedule};
use rand::Rng;

const RF: InterpolantSchedule = InterpolantSchedule::RectifiedFlow;
const PROBES: usize = 24;

fn close(analytic: f64, fd: f64, rel: f64) -> bool {
    (analytic - fd).abs() <= rel * analytic.abs().max(fd.abs()) + 1e-9
}

fn central<F: FnMut(f64) -> f64>(mut f: F, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

#[test]
fn cfm_parameter_gradient() {
    let mut rng = rng_from_seed(1);
    let field = VectorFieldNet::seeded(2, &[16, 16], 2).unwrap();
    let target = ToyTarget::four_mode_mixture();
    let batch: Vec<EndpointPair> = (0..8).map(|_| EndpointPair { x0: gaussian_vec(&mut rng, 2), x1: target.sample(&mut rng) }).collect();
    let times: Vec<f64> = (0..8).map(|_| rng.random()).collect();
    let (_, grad) = cfm_loss(&field, &RF, &batch, &times).unwrap();
    for _ in 0..PROBES {
        let j = rng.random_range(0..field.num_params());
        let fd = central(
            |h| {
                let mut f = field.clone();
                f.params_mut()[j] += h;
                cfm_loss(&f, &RF, &batch, &times).unwrap().0
            },
            1e-5,
        );
        assert!(close(grad[j], fd, 1e-3), "param {j}: analytic {} fd {fd}", grad[j]);
    }
}

#[test]
fn am_parameter_gradient() {
    let mut rng = rng_from_seed(2);
    let field = VectorFieldNet::seeded(2, &[16, 16], 3).unwrap();
    let mut control = ControlNet::seeded(2, &[8, 8], 4).unwrap();
    for p in control.params_mut() {
        *p += 0.2 * rng.random::<f64>() - 0.1;
    }
    let cfg = SamplerConfig::memoryless(20);
    let traj = sample_sde(&field, &RF, &cfg, &[0.4, -0.2], 9).unwrap();
    let cost = QuadraticCost { center: vec![1.0, 0.5], scale: 1.0 };
    let running = RunningCost::new(&cost, 0.5, TimeWeight::Unit);
    let diff = DiffusionSchedule::Memoryless;
    let adj = lean_adjoint_backward(&field, &RF, &diff, &traj, Some(&running), Some(&cost)).unwrap();
    let sub: Vec<usize> = (1..20).step_by(2).collect();
    let (_, grad) = am_loss(&control, &RF, &diff, &traj, &adj, &sub).unwrap();
    for _ in 0..PROBES {
        let j = rng.random_range(0..control.num_params());
        let fd = central(
            |h| {
                let mut c = control.clone();
                c.params_mut()[j] += h;
                am_loss(&c, &RF, &diff, &traj, &adj, &sub).unwrap().0
            },
            1e-5,
        );
        assert!(close(grad[j], fd, 1e-3), "param {j}: analytic {} fd {fd}", grad[j]);
    }
}

#[test]
fn state_jvp() {
    let mut rng = rng_from_seed(3);
    let field = VectorFieldNet::seeded(3, &[32, 32], 5).unwrap();
    for _ in 0..PROBES {
        let x = gaussian_vec(&mut rng, 3);
        let a = gaussian_vec(&mut rng, 3);
        let t: f64 = rng.random();
        let jvp = field.jvp_state(&x, t, &a);
        for k in 0..3 {
            let fd = central(
                |h| {
                    let mut y = x.clone();
                    y[k] += h;
                    field.velocity(&y, t).iter().zip(&a).map(|(v, ai)| v * ai).sum()
                },
                1e-5,
            );
            assert!(close(jvp[k], fd, 1e-4), "coord {k}: analytic {} fd {fd}", jvp[k]);
        }
    }
}

#[test]
fn cost_state_gradient() {
    let mut rng = rng_from_seed(4);
    let spec = SceneSpec { subjects: 3, ..Default::default() };
    let head = MapHead::from_spec(&spec, 2).unwrap();
    let mut checked = 0;
    for kind in [CostKind::Focus, CostKind::CosineSeparation, CostKind::Entropy] {
        let cost = SceneCost::new(head.clone(), kind);
        for _ in 0..PROBES {
            let x: Vec<f64> = gaussian_vec(&mut rng, 2).iter().map(|v| 1.5 * v).collect();
            let g = grad_cost_state(&head, kind, &x).unwrap();
            for k in 0..2 {
                let fd = central(
                    |h| {
                        let mut y = x.clone();
                        y[k] += h;
                        cost.value(&y).unwrap()
                    },
                    1e-6,
                );
                assert!(close(g[k], fd, 1e-4), "{kind:?} coord {k}: analytic {} fd {fd}", g[k]);
                checked += 1;
            }
        }
    }
    assert!(checked >= 20);
}
