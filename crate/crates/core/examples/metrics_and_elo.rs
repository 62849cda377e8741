//! Composite scores over metric reports and pairwise Elo ratings.

use std::collections::BTreeMap;

use flowctl::metrics::{composite_score, elo_update, expected_score, win_rate, EloTable, MetricRecord, MetricReport, Outcome};

fn report(focus: [f64; 3]) -> MetricReport {
    let mut r = MetricReport::new();
    for (seed, f) in focus.into_iter().enumerate() {
        let metrics = BTreeMap::from([("focus_score".to_string(), f)]);
        r.push(MetricRecord { config_hash: "demo".into(), scene_id: "train".into(), seed: seed as u64, metrics }).unwrap();
    }
    r
}

fn main() -> flowctl::Result<()> {
    let base = report([0.70, 0.75, 0.72]);
    let tuned = report([0.84, 0.80, 0.83]);
    println!("composite(base, base)  {:.4}", composite_score(&base, &base)?.score);
    println!("composite(tuned, base) {:.4}", composite_score(&tuned, &base)?.score);

    println!("expected score at a 400 point gap {:.4}", expected_score(1900.0, 1500.0));
    let mut table = EloTable::new(["base", "test_time", "adjoint"]);
    let games = [
        ("adjoint", "base", Outcome::AWins),
        ("test_time", "base", Outcome::AWins),
        ("adjoint", "test_time", Outcome::AWins),
        ("test_time", "base", Outcome::Draw),
    ];
    for (a, b, o) in games {
        elo_update(&mut table, a, b, o)?;
    }
    for name in ["base", "test_time", "adjoint"] {
        println!("{name:10} {:.1}  win rate {:.2}", table.rating(name)?, win_rate(&table, name)?);
    }
    Ok(())
}
