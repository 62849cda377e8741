use flowctl::control::lean_adjoint_backward;
use flowctl::costs::{focus_cost, jsd, jsd_normalized, LinearCost, ProbMap, SubjectMaps};
use flowctl::field::{VectorFieldNet, VelocityField};
use flowctl::metrics::{elo_update, EloTable, Outcome};
use flowctl::sampler::{sample_sde, SamplerConfig};
use flowctl::schedules::{DiffusionSchedule, InterpolantSchedule};
use proptest::prelude::*;

const RF: InterpolantSchedule = InterpolantSchedule::RectifiedFlow;

fn prob_map(raw: Vec<f64>) -> ProbMap {
    let total: f64 = raw.iter().sum();
    ProbMap::from_slice(&raw.iter().map(|v| v / total).collect::<Vec<_>>()).unwrap()
}

fn maps_strategy(n: std::ops::Range<usize>, g: usize) -> impl Strategy<Value = Vec<ProbMap>> {
    prop::collection::vec(prop::collection::vec(1e-6..1.0f64, g), n).prop_map(|ms| ms.into_iter().map(prob_map).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn jsd_stays_within_log_n(maps in maps_strategy(2..6, 9)) {
        let refs: Vec<&ProbMap> = maps.iter().collect();
        let d = jsd(&refs).unwrap();
        let n = maps.len() as f64;
        prop_assert!(d >= -1e-12 && d <= n.ln() + 1e-12, "jsd {d} for n = {n}");
        let dn = jsd_normalized(&refs).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&dn));
    }

    #[test]
    fn jsd_ignores_map_order(maps in maps_strategy(2..6, 6), rot in 0usize..5) {
        let refs: Vec<&ProbMap> = maps.iter().collect();
        let mut rotated = refs.clone();
        rotated.rotate_left(rot % refs.len());
        prop_assert!((jsd(&refs).unwrap() - jsd(&rotated).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn jsd_ignores_a_shared_cell_permutation(maps in maps_strategy(2..5, 6), shift in 1usize..6) {
        let permuted: Vec<ProbMap> = maps
            .iter()
            .map(|m| {
                let mut w = m.weights().to_vec();
                w.rotate_left(shift);
                ProbMap::from_slice(&w).unwrap()
            })
            .collect();
        let a = jsd(&maps.iter().collect::<Vec<_>>()).unwrap();
        let b = jsd(&permuted.iter().collect::<Vec<_>>()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn focus_ignores_subject_order(maps in maps_strategy(6..7, 5)) {
        let subjects: Vec<SubjectMaps> = maps
            .chunks(2)
            .enumerate()
            .map(|(i, c)| SubjectMaps::new(i, c.to_vec()).unwrap())
            .collect();
        let mut reversed = subjects.clone();
        reversed.reverse();
        prop_assert!((focus_cost(&subjects).unwrap() - focus_cost(&reversed).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn jvp_is_linear_in_the_cotangent(
        x in prop::collection::vec(-2.0..2.0f64, 2),
        t in 0.0..1.0f64,
        a in prop::collection::vec(-1.0..1.0f64, 2),
        b in prop::collection::vec(-1.0..1.0f64, 2),
        c in -3.0..3.0f64,
    ) {
        let field = VectorFieldNet::seeded(2, &[16, 16], 11).unwrap();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(ai, bi)| c * ai + bi).collect();
        let lhs = field.jvp_state(&x, t, &combo);
        let ja = field.jvp_state(&x, t, &a);
        let jb = field.jvp_state(&x, t, &b);
        for k in 0..2 {
            prop_assert!((lhs[k] - (c * ja[k] + jb[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn adjoint_is_linear_in_the_terminal_gradient(
        w1 in prop::collection::vec(-2.0..2.0f64, 2),
        w2 in prop::collection::vec(-2.0..2.0f64, 2),
        c in -3.0..3.0f64,
        seed in 0u64..1000,
    ) {
        let field = VectorFieldNet::seeded(2, &[8, 8], 3).unwrap();
        let cfg = SamplerConfig::memoryless(20);
        let traj = sample_sde(&field, &RF, &cfg, &[0.3, -0.5], seed).unwrap();
        let diff = DiffusionSchedule::Memoryless;
        let solve = |w: Vec<f64>| lean_adjoint_backward(&field, &RF, &diff, &traj, None, Some(&LinearCost { w })).unwrap();
        let a1 = solve(w1.clone());
        let a2 = solve(w2.clone());
        let mix = solve(w1.iter().zip(&w2).map(|(p, q)| c * p + q).collect());
        for i in 0..traj.times.len() {
            for k in 0..2 {
                let expect = c * a1.values[i][k] + a2.values[i][k];
                prop_assert!((mix.values[i][k] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn elo_conserves_total_rating(matches in prop::collection::vec((0usize..4, 0usize..4, 0u8..3), 1..200)) {
        let names = ["a", "b", "c", "d"];
        let mut table = EloTable::new(names);
        for (i, j, o) in matches {
            if i == j {
                continue;
            }
            let outcome = [Outcome::AWins, Outcome::BWins, Outcome::Draw][o as usize];
            elo_update(&mut table, names[i], names[j], outcome).unwrap();
        }
        prop_assert!((table.total() - 4.0 * 1500.0).abs() < 1e-9);
    }

    #[test]
    fn elo_is_antisymmetric(ra in 1000.0..2000.0f64, rb in 1000.0..2000.0f64, o in 0u8..3) {
        let outcome = [Outcome::AWins, Outcome::BWins, Outcome::Draw][o as usize];
        let flipped = match outcome {
            Outcome::AWins => Outcome::BWins,
            Outcome::BWins => Outcome::AWins,
            Outcome::Draw => Outcome::Draw,
        };
        let mut t1 = EloTable::new(["x", "y"]);
        t1.ratings.insert("x".into(), ra);
        t1.ratings.insert("y".into(), rb);
        let mut t2 = t1.clone();
        elo_update(&mut t1, "x", "y", outcome).unwrap();
        elo_update(&mut t2, "y", "x", flipped).unwrap();
        prop_assert!((t1.rating("x").unwrap() - t2.rating("x").unwrap()).abs() < 1e-9);
        prop_assert!((t1.rating("y").unwrap() - t2.rating("y").unwrap()).abs() < 1e-9);
    }
}
