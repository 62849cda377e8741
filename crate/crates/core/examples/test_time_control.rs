//! Steer ODE sampling toward lower focus cost without any training.

use flowctl::costs::{CostKind, MapHead, SceneCost, SceneSpec};
use flowctl::field::{train_cfm, ToyTarget, TrainConfig, VectorFieldNet};
use flowctl::sampler::{sample_controlled_ode, source_samples, SamplerConfig};
use flowctl::schedules::InterpolantSchedule;

const RF: InterpolantSchedule = InterpolantSchedule::RectifiedFlow;

fn main() -> flowctl::Result<()> {
    let mut field = VectorFieldNet::seeded(2, &[64, 64], 2)?;
    train_cfm(&mut field, &RF, &ToyTarget::four_mode_mixture(), &TrainConfig { steps: 2000, seed: 2, ..Default::default() })?;
    let cost = SceneCost::new(MapHead::from_spec(&SceneSpec::default(), 2)?, CostKind::Focus);
    let cfg = SamplerConfig::ode(28);
    let x0s = source_samples(2, 64, 3);

    for lambda in [0.0, 0.003, 0.01, 0.03, 0.1] {
        let mut total = 0.0;
        for x0 in &x0s {
            let end = sample_controlled_ode(&field, &RF, &cfg, &cost, lambda, x0)?;
            total += cost.score(end.endpoint())?;
        }
        println!("lambda {lambda:<6} mean focus {:.4}", total / x0s.len() as f64);
    }
    Ok(())
}
