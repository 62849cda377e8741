//! Fit a velocity field to the four-mode mixture and save it.

use flowctl::field::checkpoint::{self, CheckpointKind};
use flowctl::field::{train_cfm, ToyTarget, TrainConfig, VectorFieldNet};
use flowctl::schedules::InterpolantSchedule;

fn main() -> flowctl::Result<()> {
    let target = ToyTarget::four_mode_mixture();
    let mut field = VectorFieldNet::seeded(2, &[64, 64], 1)?;
    let cfg = TrainConfig { steps: 2000, seed: 1, ..Default::default() };
    let report = train_cfm(&mut field, &InterpolantSchedule::RectifiedFlow, &target, &cfg)?;
    for (i, loss) in report.losses.iter().enumerate().step_by(250) {
        println!("step {i:5}  loss {loss:.4}");
    }
    println!("smoothed final loss {:.4}", report.final_smoothed_loss);

    let path = std::env::temp_dir().join("mixture.fctl");
    checkpoint::save(&path, CheckpointKind::VectorField, field.mlp())?;
    println!("saved {} ({})", path.display(), checkpoint::params_checksum(field.params()));
    Ok(())
}
