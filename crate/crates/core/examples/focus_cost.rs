//! Attention-like maps from a 2-D state and the costs defined on them.

use flowctl::costs::{cosine_separation_cost, focus_cost, CostKind, MapHead, ProbMap, SceneCost, SceneSpec, StateCost, SubjectMaps};

fn main() -> flowctl::Result<()> {
    // Two subjects looking at the same cell versus different cells.
    let shape = (4, 4);
    let overlap = [SubjectMaps::new(0, vec![ProbMap::point_mass(shape, 5)])?, SubjectMaps::new(1, vec![ProbMap::point_mass(shape, 5)])?];
    let apart = [SubjectMaps::new(0, vec![ProbMap::point_mass(shape, 0)])?, SubjectMaps::new(1, vec![ProbMap::point_mass(shape, 15)])?];
    println!("focus  overlap {:.4}  apart {:.4}", focus_cost(&overlap)?, focus_cost(&apart)?);
    println!("cosine overlap {:.4}  apart {:.4}", cosine_separation_cost(&overlap)?, cosine_separation_cost(&apart)?);

    let head = MapHead::from_spec(&SceneSpec::default(), 2)?;
    let cost = SceneCost::new(head, CostKind::Focus);
    for x in [[0.0, 0.0], [1.2, 1.2], [-1.2, 1.2]] {
        let g = cost.grad(&x)?;
        println!("x = {x:?}  focus {:.4}  grad [{:.4}, {:.4}]", cost.score(&x)?, g[0], g[1]);
    }
    Ok(())
}
