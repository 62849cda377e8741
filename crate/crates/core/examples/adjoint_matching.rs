//! Fine-tune a control network with Adjoint Matching and compare against base.

use flowctl::control::{apply_control_inference, finetune_adjoint_matching, AMConfig};
use flowctl::costs::{CostKind, MapHead, SceneCost, SceneSpec};
use flowctl::field::{train_cfm, ToyTarget, TrainConfig, VectorFieldNet};
use flowctl::sampler::{sample_ode, source_samples, SamplerConfig};
use flowctl::schedules::InterpolantSchedule;

const RF: InterpolantSchedule = InterpolantSchedule::RectifiedFlow;

fn main() -> flowctl::Result<()> {
    let mut field = VectorFieldNet::seeded(2, &[64, 64], 2)?;
    train_cfm(&mut field, &RF, &ToyTarget::four_mode_mixture(), &TrainConfig { steps: 2000, seed: 2, ..Default::default() })?;
    let cost = SceneCost::new(MapHead::from_spec(&SceneSpec::default(), 2)?, CostKind::Focus);

    let cfg = AMConfig::default();
    let (control, report) = finetune_adjoint_matching(&field, &RF, &cost, &cfg, 5)?;
    // The regression targets move with the control, so the loss need not fall.
    println!("{} iterations, base checksum {}", report.losses.len(), report.base_checksum);

    let ode = SamplerConfig::ode(28);
    let (mut base, mut tuned) = (0.0, 0.0);
    let x0s = source_samples(2, 64, 700);
    for x0 in &x0s {
        base += cost.score(sample_ode(&field, &RF, &ode, x0)?.endpoint())?;
        tuned += cost.score(apply_control_inference(&field, &control, &RF, &ode, x0)?.endpoint())?;
    }
    let n = x0s.len() as f64;
    println!("held-out mean focus: base {:.4}, fine-tuned {:.4}", base / n, tuned / n);
    Ok(())
}
