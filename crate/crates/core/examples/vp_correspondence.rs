//! A discrete VP noising chain as an FM schedule, sampled through a
//! noise-prediction model.

use flowctl::field::{EpsilonVelocity, GaussianEpsilon, GaussianPathField};
use flowctl::sampler::{sample_ode, source_samples, SamplerConfig};
use flowctl::schedules::{vp_to_fm_schedule, VpRateTable};

fn main() -> flowctl::Result<()> {
    let table = VpRateTable::linear(1000, 1e-4, 2e-2)?;
    println!("terminal abar {:.3e}", table.terminal_alpha_bar());
    let sched = vp_to_fm_schedule(&table)?;
    for t in [0.1, 0.5, 0.9, 1.0] {
        println!("t {t:.1}  alpha {:.4}  beta {:.4}", sched.alpha(t), sched.beta(t));
    }

    let (mean, std) = (vec![0.8, -1.2], 0.6);
    let via_eps = EpsilonVelocity { sched: sched.clone(), predictor: GaussianEpsilon { sched: sched.clone(), mean: mean.clone(), std } };
    let exact = GaussianPathField { sched: sched.clone(), mean, std };
    let cfg = SamplerConfig::ode(1000);
    for x0 in source_samples(2, 4, 1) {
        let a = sample_ode(&via_eps, &sched, &cfg, &x0)?;
        let b = sample_ode(&exact, &sched, &cfg, &x0)?;
        println!("eps-model {:?}  exact {:?}", a.endpoint(), b.endpoint());
    }
    Ok(())
}
