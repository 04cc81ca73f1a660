use proptest::prelude::*;

use pchm::cluster::label_components;
use pchm::env::{decode_field, encode_field, sample_field, ConductanceField, FieldLaw};
use pchm::exclusion::{simulate_exclusion, ClockSchedule, OccupancyConfig};
use pchm::graph::ClusterGraph;
use pchm::solver::{cg_solve, AliasTable, CgOptions, Gauge, MaskedLaplacian};
use pchm::streams::stream;

fn field_strategy() -> impl Strategy<Value = ConductanceField> {
    (2usize..=3, 2usize..=6, 0.0f64..0.6, any::<u64>()).prop_map(|(dim, side, p_zero, seed)| {
        let side = if dim == 3 { side.min(4) } else { side };
        let law = FieldLaw::IidMixture {
            p_zero,
            positive: pchm::env::PositiveLaw::Uniform { lo: 0.1, hi: 1.0 },
        };
        sample_field(&law, dim, side, 1.0, seed).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_is_symmetric_and_matches_dirichlet_form(
        field in field_strategy(),
        seed in any::<u64>(),
    ) {
        let lab = label_components(&field);
        let lap = MaskedLaplacian::new(&field, &lab, 1.0).unwrap();
        let n = lap.len();
        prop_assume!(n > 0);
        let mut rng = stream(seed, "prop", 0);
        use rand::Rng;
        let f: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let lf = lap.apply(&f).unwrap();
        let lg = lap.apply(&g).unwrap();
        let a: f64 = g.iter().zip(&lf).map(|(x, y)| x * y).sum();
        let b: f64 = f.iter().zip(&lg).map(|(x, y)| x * y).sum();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        let neg: f64 = -f.iter().zip(&lf).map(|(x, y)| x * y).sum::<f64>();
        let energy = lap.dirichlet_energy(&f).unwrap();
        prop_assert!(energy >= 0.0);
        prop_assert!((neg - energy).abs() <= 1e-12 * (1.0 + energy));
        // constants are in the kernel
        let ones = lap.apply(&vec![1.0; n]).unwrap();
        prop_assert!(ones.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cg_solves_mean_zero_problems(field in field_strategy(), seed in any::<u64>()) {
        let lab = label_components(&field);
        let lap = MaskedLaplacian::new(&field, &lab, -1.0).unwrap();
        let n = lap.len();
        prop_assume!(n > 1);
        let mut rng = stream(seed, "prop-cg", 0);
        use rand::Rng;
        let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let m = x.iter().sum::<f64>() / n as f64;
        x.iter_mut().for_each(|v| *v -= m);
        let b = lap.apply(&x).unwrap();
        let out = cg_solve(
            |g, o| lap.apply_into(g, o).unwrap(),
            &b,
            CgOptions::default().with_gauge(Gauge::MeanZero),
        ).unwrap();
        prop_assert!(out.converged);
        let err = x.iter().zip(&out.x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6, "max error {err}");
    }

    #[test]
    fn field_dump_round_trips(field in field_strategy()) {
        let bytes = encode_field(&field);
        let back = decode_field(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.weights(), field.weights());
        prop_assert_eq!(back.checksum(), field.checksum());
    }

    #[test]
    fn giant_is_closed_under_positive_bonds(field in field_strategy()) {
        let lab = label_components(&field);
        let torus = *field.torus();
        prop_assert_eq!(
            lab.giant_size(),
            lab.component_sizes().iter().copied().max().unwrap_or(0)
        );
        for x in 0..torus.n_sites() {
            for axis in 0..torus.dim() {
                if field.weight(x, axis) > 0.0 {
                    let y = torus.forward(x, axis);
                    prop_assert_eq!(lab.in_giant(x), lab.in_giant(y));
                    prop_assert_eq!(lab.component(x), lab.component(y));
                }
            }
        }
    }

    #[test]
    fn alias_probabilities_match_weights(weights in prop::collection::vec(0.0f64..5.0, 1..40)) {
        let total: f64 = weights.iter().sum();
        prop_assume!(total > 0.0);
        let table = AliasTable::new(&weights).unwrap();
        for (p, w) in table.probabilities().iter().zip(&weights) {
            prop_assert!((p - w / total).abs() < 1e-12);
        }
    }

    #[test]
    fn exclusion_conserves_particles(field in field_strategy(), k in 0usize..20, seed in any::<u64>()) {
        let lab = label_components(&field);
        let n = lab.giant_size();
        prop_assume!(n > 0);
        let sched = ClockSchedule::from_field(&field, &lab).unwrap();
        let eta = OccupancyConfig::from_occupied(n, (0..n).filter(|i| i % 3 == k % 3)).unwrap();
        let mut rng = stream(seed, "prop-sep", 0);
        let run = simulate_exclusion(&sched, &eta, 3.0, &[0.5, 1.5, 3.0], &mut rng).unwrap();
        for s in &run.snapshots {
            prop_assert_eq!(s.count_ones(), eta.particle_count());
        }
    }

    #[test]
    fn graph_rates_sum_to_twice_bond_weight(field in field_strategy()) {
        let lab = label_components(&field);
        let g = ClusterGraph::new(&field, &lab).unwrap();
        let total: f64 = (0..g.len()).map(|i| g.total_rate(i)).sum();
        let bonds: f64 = g.bonds().iter().map(|b| b.2).sum();
        prop_assert!((total - 2.0 * bonds).abs() < 1e-9 * (1.0 + total));
    }
}
