use proptest::prelude::*;

use entangle_core::blocks::{apply_entanglement, Checkpoint};
use entangle_core::entangle::{format_kernel_file, make_dense_gamma, materialize, parse_kernel_file};
use entangle_core::harness::{ExperimentConfig, ModelKind, Task};
use entangle_core::linalg::l2_norm;
use entangle_core::refine::lemma1_bounds;
use entangle_core::rng::SeededRng;
use entangle_core::{EntanglementKind, EntanglementSpec, Tensor};

fn any_spec() -> impl Strategy<Value = EntanglementSpec> {
    use EntanglementKind as K;
    let gamma = prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0f64];
    let k = prop_oneof![Just(1usize), Just(3), Just(5)];
    (0..8usize, gamma, k, 1..6usize, 1..9usize, any::<u64>()).prop_map(|(kind, g, k, c, n, seed)| {
        match kind {
            0 => EntanglementSpec::identity(),
            1 => EntanglementSpec::none(),
            2 => EntanglementSpec::dense(n, g),
            3 => EntanglementSpec::orthogonal(n, seed),
            4 => EntanglementSpec::conv(K::Spatial, k, c, g),
            5 => EntanglementSpec::conv(K::Channel, k, c, g),
            6 => EntanglementSpec::conv(K::ChannelSpatial, k, c, g),
            _ => EntanglementSpec::conv(K::OrthogonalChannel, 1, c, 0.0).with_seed(seed),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spec_text_round_trips(spec in any_spec()) {
        let back: EntanglementSpec = spec.to_string().parse().unwrap();
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn kernel_files_round_trip_exactly(spec in any_spec()) {
        prop_assume!(!matches!(spec.kind, EntanglementKind::Identity | EntanglementKind::None));
        let values = materialize(&spec).unwrap();
        let (s, v) = parse_kernel_file(&format_kernel_file(&spec, &values)).unwrap();
        prop_assert_eq!(s, spec);
        prop_assert_eq!(v, values);
    }

    #[test]
    fn dense_gamma_is_symmetric_and_doubly_stochastic(n in 1..40usize, gamma in 0.0..=1.0f64) {
        let m = make_dense_gamma(n, gamma).unwrap();
        for i in 0..n {
            let row: f64 = (0..n).map(|j| m.get(i, j)).sum();
            prop_assert!((row - 1.0).abs() < 1e-12);
            for j in 0..n {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn dense_skip_preserves_the_feature_mean(n in 1..20usize, gamma in 0.0..=1.0f64, seed: u64) {
        let x = Tensor::randn(&[3, n], 1.0, &mut SeededRng::new(seed));
        let y = apply_entanglement(&EntanglementSpec::dense(n, gamma), &x).unwrap();
        for (xr, yr) in x.data().chunks(n).zip(y.data().chunks(n)) {
            let (mx, my) = (xr.iter().sum::<f64>(), yr.iter().sum::<f64>());
            prop_assert!((mx - my).abs() <= 1e-12 * (1.0 + mx.abs()));
        }
    }

    #[test]
    fn orthogonal_skip_preserves_norms(n in 1..20usize, seed: u64, xs: u64) {
        let x = Tensor::randn(&[n], 1.0, &mut SeededRng::new(xs));
        let y = apply_entanglement(&EntanglementSpec::orthogonal(n, seed), &x).unwrap();
        prop_assert!((l2_norm(y.data()) - l2_norm(x.data())).abs() < 1e-12 * (1.0 + l2_norm(x.data())));
    }

    #[test]
    fn channel_skip_of_a_constant_map_is_constant_inside(c in 1..5usize, gamma in 0.0..=1.0f64) {
        // zero padding only touches the border, so the interior stays at the input value
        let spec = EntanglementSpec::conv(EntanglementKind::Channel, 3, c, gamma);
        let x = Tensor::full(&[5, 5, c], 2.5);
        let y = apply_entanglement(&spec, &x).unwrap();
        for i in 1..4 {
            for j in 1..4 {
                for ch in 0..c {
                    prop_assert!((y.data()[(i * 5 + j) * c + ch] - 2.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bounds_are_ordered(f in 0.0..10.0f64, x in 1e-3..10.0f64, gamma in 0.0..1.0f64, s in 1.0..3.0f64) {
        let (lo, hi) = lemma1_bounds(f, x, gamma, s).unwrap();
        prop_assert!(lo <= hi);
        prop_assert!(lo >= 0.0);
    }

    #[test]
    fn checkpoints_round_trip(values in proptest::collection::vec(-1e300..1e300f64, 1..30), key in "[a-z]{1,8}") {
        let mut c = Checkpoint::new();
        c.set_meta(key.clone(), "v a l u e");
        c.push_tensor("t", Tensor::new(&[values.len()], values).unwrap());
        let back = Checkpoint::parse(&c.to_text()).unwrap();
        prop_assert_eq!(back.meta(&key), Some("v a l u e"));
        prop_assert_eq!(back.tensor("t").unwrap(), c.tensor("t").unwrap());
    }

    #[test]
    fn configs_round_trip(depth in 1..8usize, width in 1..32usize, epochs in 0..50usize, spec in any_spec(),
                          seeds in proptest::collection::vec(any::<u64>(), 1..5)) {
        let mut cfg = ExperimentConfig::new(Task::DigitsLite, ModelKind::ResCnn);
        cfg.depth = depth;
        cfg.width = width;
        cfg.epochs = epochs;
        cfg.seeds = seeds;
        cfg.entanglement = spec.clone();
        cfg.sweep = vec![spec, EntanglementSpec::identity()];
        let back: ExperimentConfig = cfg.to_text().parse().unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}
