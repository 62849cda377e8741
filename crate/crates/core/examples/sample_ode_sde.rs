//! ODE and memoryless-SDE sampling from the same field, plus noise replay.

use flowctl::field::{train_cfm, ToyTarget, TrainConfig, VectorFieldNet};
use flowctl::metrics::energy_distance;
use flowctl::rng::rng_from_seed;
use flowctl::sampler::{replay, sample_ode, sample_sde, source_samples, SamplerConfig};
use flowctl::schedules::InterpolantSchedule;

const RF: InterpolantSchedule = InterpolantSchedule::RectifiedFlow;

fn main() -> flowctl::Result<()> {
    let target = ToyTarget::four_mode_mixture();
    let mut field = VectorFieldNet::seeded(2, &[64, 64], 2)?;
    train_cfm(&mut field, &RF, &target, &TrainConfig { steps: 2000, seed: 2, ..Default::default() })?;

    let ode = SamplerConfig::ode(28);
    let sde = SamplerConfig::memoryless(28);
    let x0s = source_samples(2, 1024, 7);
    let mut ode_ends = Vec::new();
    let mut sde_ends = Vec::new();
    for (i, x0) in x0s.iter().enumerate() {
        ode_ends.push(sample_ode(&field, &RF, &ode, x0)?.endpoint().to_vec());
        sde_ends.push(sample_sde(&field, &RF, &sde, x0, i as u64)?.endpoint().to_vec());
    }
    let data = target.sample_n(&mut rng_from_seed(8), 1024);
    println!("ED(ode, data) {:.4}", energy_distance(&ode_ends, &data)?);
    println!("ED(sde, data) {:.4}", energy_distance(&sde_ends, &data)?);

    let traj = sample_sde(&field, &RF, &sde, &x0s[0], 99)?;
    let again = replay(&field, &RF, &sde, &traj)?;
    println!("replay identical: {}", again.states == traj.states);
    Ok(())
}
