//! Cross-module properties checked through the public API only.

use proptest::prelude::*;

use translab::chains::EmpiricalMeasure;
use translab::coupling::{sample_coupled, DecayFunction};
use translab::observable::Observable;
use translab::oracle::{
    exact_poisson, observable_vector, poisson_residual, powers_of_one, CylinderSpace, OracleSystem,
};
use translab::potential::Potential;
use translab::rng::substream;
use translab::space::{AprioriMeasure, Config};
use translab::systems::{IfsSystem, WeightedShiftSystem};
use translab::transfer::{apply_transfer_n, KernelSpec, NormalizeConfig};

fn table_system(s: usize, k: usize, values: &[f64]) -> OracleSystem {
    let points: Vec<f64> = (0..s).map(|i| i as f64).collect();
    let table = values[..s.pow(k as u32)].to_vec();
    let f = Potential::finite_range(points.clone(), k, move |w| {
        table[w.iter().fold(0usize, |acc, &a| acc * s + a as usize)]
    })
    .unwrap();
    OracleSystem::new(&CylinderSpace::uniform(points, k).unwrap(), &f).unwrap()
}

fn padded(o: &OracleSystem, w: usize, depth: usize) -> Vec<f64> {
    let mut x = o.space.word(w);
    x.resize(depth, 0.0);
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn word_tree_matches_matrix_powers(
        s in 2usize..4,
        k in 1usize..3,
        n in 1usize..5,
        values in proptest::collection::vec(-1.0f64..1.0, 9),
        w_seed in 0usize..1000,
    ) {
        let o = table_system(s, k, &values);
        let w = w_seed % o.space.states();
        let depth = k + n + 1;
        let x = Config::new(o.space.measure().unwrap().alphabet(), padded(&o, w, depth)).unwrap();
        let mut rng = substream(w_seed as u64, "properties-tree");
        let tree = apply_transfer_n(&o.kernel().unwrap(), &o.potential, &Observable::constant(1.0), &x, n, 16, &mut rng)
            .unwrap();
        let matrix = powers_of_one(&o.matrix, n)[n][w];
        prop_assert!(tree.exact);
        prop_assert_eq!(tree.std_error, 0.0);
        prop_assert!((tree.value / matrix - 1.0).abs() < 1e-10, "{} vs {}", tree.value, matrix);
    }

    #[test]
    fn exact_normalization_gives_a_probability_kernel(
        s in 2usize..4,
        k in 1usize..3,
        values in proptest::collection::vec(-1.0f64..1.0, 9),
        w_seed in 0usize..1000,
    ) {
        let o = table_system(s, k, &values);
        let depth = k + 2;
        let sys = o.normalized_system(depth, &NormalizeConfig::default()).unwrap();
        let w = w_seed % o.space.states();
        let (est, _, _) = sys.transfer_one(&padded(&o, w, depth), 16, 0);
        prop_assert!(est.exact);
        prop_assert_eq!(est.std_error, 0.0);
        prop_assert!((est.value - 1.0).abs() < 1e-10, "{}", est.value);
        let (lo, hi) = sys.f_bar_bounds();
        prop_assert!(lo <= hi && lo.is_finite() && hi.is_finite());
    }

    #[test]
    fn stationary_law_is_invariant_and_poisson_solution_exact(
        s in 2usize..4,
        k in 1usize..3,
        values in proptest::collection::vec(-1.0f64..1.0, 9),
    ) {
        let o = table_system(s, k, &values);
        let total: f64 = o.pi.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
        prop_assert!(o.pi.iter().all(|&p| p > 0.0));
        for (a, b) in o.p.apply_left(&o.pi).iter().zip(&o.pi) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        let raw = Observable::coordinate(1, 0, 1, (s - 1) as f64);
        let phi = raw.centered(o.mean(&raw));
        let vec = observable_vector(&o.space, &phi);
        let ups = exact_poisson(&o.p, &vec, &o.pi).unwrap();
        prop_assert!(poisson_residual(&o.p, &ups, &vec) < 1e-9);
    }

    #[test]
    fn coupled_paths_share_their_word_and_contract(
        kind in 0usize..4,
        depth in 1usize..24,
        n_seed in 0usize..100,
        seed in 0u64..10_000,
    ) {
        let m = match kind {
            0 => AprioriMeasure::uniform_finite(vec![0.0, 1.0, 2.0]).unwrap(),
            1 => AprioriMeasure::sphere(2).unwrap(),
            2 => AprioriMeasure::sphere(4).unwrap(),
            _ => AprioriMeasure::exponential(),
        };
        let mut rng = substream(seed, "properties-coupling");
        let x = Config::random(&m, depth, &mut rng);
        let y = Config::random(&m, depth, &mut rng);
        let n = n_seed % (depth + 1);
        let p = sample_coupled(&KernelSpec::FullShift(m), &x, &y, n, &mut rng).unwrap();
        prop_assert!(p.shares_prefix());
        prop_assert!(p.satisfies_contraction());
        prop_assert!(p.distance_after() <= 1.0 && p.distance_before() <= 1.0);
    }

    #[test]
    fn decay_functions_satisfy_their_definition(
        big_b in 1.0f64..4.0,
        small_b in 0.05f64..0.95,
        alpha in 0.2f64..3.0,
    ) {
        let f = DecayFunction::new(big_b, small_b, alpha).unwrap();
        let ledger = f.ledger(12, 1e-3, 1.0, 12);
        prop_assert!(ledger.holds, "{ledger:?}");
        for n in 0..12 {
            for i in 0..12 {
                let r = 1e-3 * 1000f64.powf(i as f64 / 11.0);
                prop_assert!(f.eval(n as f64 + 1.0, r) <= f.eval(n as f64, r) + 1e-15);
                prop_assert!(f.eval(n as f64, r) <= f.linear_constant() * r * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn weighted_shift_tables_recompute(weights in proptest::collection::vec(1.1f64..3.0, 2..12)) {
        let dim = weights.len();
        let sys = WeightedShiftSystem::new(weights.clone(), 1.0, 3.5, 1.0).unwrap();
        for n in 1..=dim {
            let direct = (0..=dim - n)
                .map(|k| weights[k..k + n].iter().product::<f64>())
                .fold(f64::INFINITY, f64::min);
            prop_assert!((sys.d_n(n) / direct - 1.0).abs() < 1e-12);
        }
        let x: Vec<f64> = (0..dim).map(|i| (i as f64).sin()).collect();
        let mut back = vec![0.0; dim];
        sys.preimage_step(0.0, &x, &mut back);
        let forward = sys.apply(&back).unwrap();
        for i in 0..dim - 1 {
            prop_assert!((forward[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn ifs_probabilities_and_constants(x in 0.0f64..1.0, c in -5.0f64..5.0) {
        let ifs = IfsSystem::dyadic();
        let p = ifs.probabilities(&[x]);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&q| q > 0.0));
        prop_assert!((ifs.transfer(&|_| c, &[x]) - c).abs() < 1e-12);
    }

    #[test]
    fn empirical_measures_have_unit_mass(atoms in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 1..40)) {
        let nu = EmpiricalMeasure::new(atoms);
        prop_assert!((nu.integrate(&Observable::constant(1.0)) - 1.0).abs() < 1e-12);
    }
}
