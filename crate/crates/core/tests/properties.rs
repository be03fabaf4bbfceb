use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparse_t1::experiments::{random_test_function, trial_rng};
use sparse_t1::*;

fn values(level: u32, d: u32) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, 1usize << (level * d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn haar_expansion_is_orthogonal(v in values(5, 1)) {
        let geo = GridGeometry::<1>::unit(5).unwrap();
        let f = GridFunction::from_values(geo, v).unwrap();
        let mean = average(&f, &geo.window()).unwrap();
        let rest = project(&f, |_| true);
        let recon = &rest + &GridFunction::constant(geo, mean);
        prop_assert!((&recon - &f).l2_norm() <= 1e-10 * (1.0 + f.l2_norm()));
        let split = (rest.l2_norm().powi(2) + mean * mean) - f.l2_norm().powi(2);
        prop_assert!(split.abs() <= 1e-9 * (1.0 + f.l2_norm().powi(2)));
    }

    #[test]
    fn cz_decomposition_identities_2d(v in values(3, 2), lambda in 0.1..5.0f64) {
        let geo = GridGeometry::<2>::unit(3).unwrap();
        let f = GridFunction::from_values(geo, v).unwrap();
        let cz = cz_decompose(&f, lambda).unwrap();
        prop_assert!((&(&cz.good + &cz.bad_part()) - &f).sup_norm() <= 1e-12 * (1.0 + f.sup_norm()));
        for a in &cz.atoms {
            prop_assert!(a.values.iter().sum::<f64>().abs() <= 1e-10 * (1.0 + f.sup_norm()) * a.values.len() as f64);
        }
        if !cz.degenerate {
            prop_assert!(cz.good.sup_norm() <= 4.0 * lambda * (1.0 + 1e-12));
            prop_assert!(cz.bad_measure() <= f.l1_norm() / lambda * (1.0 + 1e-12));
        }
    }

    #[test]
    fn maximal_function_dominates_averages(v in values(5, 1), scale in -5i32..=0, idx in 0i64..32) {
        let geo = GridGeometry::<1>::unit(5).unwrap();
        let f = GridFunction::from_values(geo, v).unwrap();
        let m = maximal_function(&f);
        let q = Cube::new(scale, [idx % (1i64 << -scale)]);
        let avg = average(&f.abs(), &q).unwrap();
        for i in geo.cube_cells(&q).unwrap() {
            prop_assert!(m.values()[i] >= avg - 1e-12);
            prop_assert!(m.values()[i] >= f.values()[i].abs());
        }
    }

    #[test]
    fn shifted_parents_contain_children(seed in any::<u64>(), x in 0i64..64, s in -6i32..0) {
        let geo = GridGeometry::<1>::unit(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = DyadicGrid::shifted(GridId(3), geo, ShiftSequence::random(&mut rng, -6, 12)).unwrap();
        let q = grid.cube_containing([x], s).unwrap();
        let p = grid.parent(&q).unwrap();
        prop_assert!(grid.children(&p).unwrap().contains(&q));
        prop_assert!(grid.contains(&p, &q).unwrap());
        prop_assert_eq!(grid.cube_containing([x], s + 1).unwrap(), p);
    }

    #[test]
    fn badness_shrinks_with_r(seed in any::<u64>(), r in 4u32..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = ShiftSequence::<2>::random(&mut rng, -40, 41);
        let q = Cube::new(0, [0, 0]);
        let lo = classify_good(&q, &omega, &GoodnessParams::new(0.25, r).unwrap()).unwrap();
        let hi = classify_good(&q, &omega, &GoodnessParams::new(0.25, r + 1).unwrap()).unwrap();
        prop_assert!(!(hi == Goodness::Bad && lo == Goodness::Good));
    }

    #[test]
    fn sparse_collections_survive_json(seed in any::<u64>()) {
        let geo = GridGeometry::<2>::unit(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = DyadicGrid::shifted(GridId(2), geo, ShiftSequence::random(&mut rng, -4, 5)).unwrap();
        let c = random_sparse_collection(&mut rng, &grid, 0.5, 4).unwrap();
        let back: SparseCollection<2> = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        let f = random_test_function(geo, &mut rng, 4).abs();
        let g = random_test_function(geo, &mut rng, 4).abs();
        prop_assert!((c.lambda(&f, &g).unwrap() - back.lambda(&f, &g).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(c.verify().unwrap(), back.verify().unwrap());
        prop_assert!((c.lambda(&f, &g).unwrap() - c.lambda_pointwise(&f, &g).unwrap()).abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn hilbert_form_is_antisymmetric(seed in any::<u64>()) {
        let geo = GridGeometry::<1>::unit(6).unwrap();
        let op = DiscreteOperator::new(KernelSpec::parse("hilbert").unwrap(), geo, 6).unwrap();
        let mut rng = trial_rng(seed, 0);
        let f = random_test_function(geo, &mut rng, 6);
        let g = random_test_function(geo, &mut rng, 6);
        let a = op.bilinear_form(&f, &g).unwrap();
        let b = op.bilinear_form(&g, &f).unwrap();
        prop_assert!((a + b).abs() <= 1e-12 * (1.0 + a.abs()));
        prop_assert!((op.apply_transpose(&f).unwrap().inner(&g).unwrap() - b).abs() <= 1e-12);
    }

    #[test]
    fn stopping_trees_are_sparse_and_nested(seed in any::<u64>()) {
        let geo = GridGeometry::<1>::unit(7).unwrap();
        let op = DiscreteOperator::new(KernelSpec::parse("hilbert").unwrap(), geo, 6).unwrap();
        let mut rng = trial_rng(seed, 1);
        let f = random_test_function(geo, &mut rng, 7);
        let g = random_test_function(geo, &mut rng, 7);
        let tree = build_stopping_tree(&op, &f, &g, &geo.window(), 4.0).unwrap();
        prop_assert!(tree.collection(geo).verify().unwrap().passed);
        for n in &tree.nodes {
            if let Some(p) = n.parent {
                prop_assert!(tree.nodes[p].cube.contains(&n.cube));
            }
        }
    }

    #[test]
    fn universal_levels_are_bracketed(seed in any::<u64>()) {
        let geo = GridGeometry::<2>::unit(5).unwrap();
        let mut rng = trial_rng(seed, 2);
        let f = random_test_function(geo, &mut rng, 5).abs();
        let g = random_test_function(geo, &mut rng, 5).abs();
        let uni = universal_sparse(&f, &g, &shifted_grid_family(&geo, 40)).unwrap();
        for l in &uni.levels {
            let lo = uni.base.powi(l.level as i32);
            prop_assert!(l.product >= lo * (1.0 - 1e-12) && l.product <= 16.0 * lo * (1.0 + 1e-12));
        }
    }
}
