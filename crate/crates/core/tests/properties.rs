use std::f64::consts::TAU;

use num_complex::Complex64;
use proptest::prelude::*;
use qmeas_core::data::{make_circles, make_moons, split_and_standardize, Prng};
use qmeas_core::gradients::{grad_expectation_wrt_angles, GradientRequest, Measurement};
use qmeas_core::models::{Model, ModelSpec, VariantKind};
use qmeas_core::neural::bce_loss;
use qmeas_core::observable::{
    eigen_bounds, expectation, expectation_from_params, hermitian_from_params, param_count, params_from_hermitian,
    pauli_z_expectation, ObservableParams,
};
use qmeas_core::qstate::{forward_state, AnsatzConfig, CircuitParams, StateVector};

fn circuit() -> impl Strategy<Value = (AnsatzConfig, Vec<f64>, Vec<f64>)> {
    (1usize..=4, 1usize..=3).prop_flat_map(|(n, depth)| {
        let cfg = AnsatzConfig::new(n, depth).unwrap();
        (
            Just(cfg),
            prop::collection::vec(0.0..TAU, cfg.param_count()),
            prop::collection::vec(-3.0..3.0f64, 1..=4),
        )
    })
}

fn state_and_observable(max_qubits: usize) -> impl Strategy<Value = (StateVector, ObservableParams)> {
    (1usize..=max_qubits).prop_flat_map(|n| {
        let dim = 1usize << n;
        (
            prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), dim),
            prop::collection::vec(-2.0..2.0f64, param_count(dim)),
        )
            .prop_filter_map("non-zero state", move |(amps, values)| {
                let norm = amps.iter().map(|(r, i)| r * r + i * i).sum::<f64>().sqrt();
                (norm > 1e-3).then(|| {
                    let amps = amps.iter().map(|(r, i)| Complex64::new(r / norm, i / norm)).collect();
                    (
                        StateVector::from_amplitudes(amps).unwrap(),
                        ObservableParams::new(n, values).unwrap(),
                    )
                })
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn forward_state_preserves_norm((cfg, angles, x) in circuit()) {
        let s = forward_state(&x, &CircuitParams::new(angles, &cfg).unwrap(), &cfg).unwrap();
        prop_assert!((s.norm_sqr() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_state_is_deterministic((cfg, angles, x) in circuit()) {
        let p = CircuitParams::new(angles, &cfg).unwrap();
        prop_assert_eq!(forward_state(&x, &p, &cfg).unwrap(), forward_state(&x, &p, &cfg).unwrap());
    }

    #[test]
    fn expectation_within_spectrum((state, obs) in state_and_observable(3)) {
        let b = hermitian_from_params(&obs);
        let e = expectation(&state, &b).unwrap();
        let (lo, hi) = eigen_bounds(&b).unwrap();
        prop_assert!(lo - 1e-8 <= e && e <= hi + 1e-8, "{} not in [{}, {}]", e, lo, hi);
    }

    #[test]
    fn hermitian_round_trip_is_exact((_, obs) in state_and_observable(3)) {
        let b = hermitian_from_params(&obs);
        prop_assert_eq!(params_from_hermitian(&b), obs);
        for i in 0..b.dim() {
            for j in 0..b.dim() {
                prop_assert_eq!(b.get(i, j), b.get(j, i).conj());
            }
        }
    }

    #[test]
    fn matrix_and_parameter_routes_agree((state, obs) in state_and_observable(3)) {
        let via_matrix = expectation(&state, &hermitian_from_params(&obs)).unwrap();
        let via_params = expectation_from_params(state.amplitudes(), obs.values());
        prop_assert!((via_matrix - via_params).abs() < 1e-12);
    }

    #[test]
    fn pauli_fast_path_matches_matrix((state, _) in state_and_observable(4), q in 0usize..4) {
        let q = q % state.n_qubits();
        let fast = pauli_z_expectation(&state, q).unwrap();
        let dense = expectation(&state, &hermitian_from_params(&ObservableParams::pauli_z(state.n_qubits(), q))).unwrap();
        prop_assert!((fast - dense).abs() < 1e-12);
    }

    #[test]
    fn gradients_are_periodic_and_linear(
        (cfg, angles, x) in circuit().prop_filter("small", |(c, _, _)| c.n_qubits <= 3),
        k in 0usize..64,
        alpha in -3.0..3.0f64,
        seed in any::<u64>(),
    ) {
        let mut rng = Prng::new(seed, 0);
        let values: Vec<f64> = (0..param_count(cfg.dim())).map(|_| rng.normal()).collect();
        let req = |angles: Vec<f64>, scale: f64| GradientRequest {
            x: x.clone(),
            params: CircuitParams::new(angles, &cfg).unwrap(),
            cfg,
            measurement: Measurement::Params(
                ObservableParams::new(cfg.n_qubits, values.iter().map(|v| v * scale).collect()).unwrap(),
            ),
        };
        let g = grad_expectation_wrt_angles(&req(angles.clone(), 1.0)).unwrap();
        let mut shifted = angles.clone();
        let k = k % shifted.len();
        shifted[k] += TAU;
        let g_shift = grad_expectation_wrt_angles(&req(shifted, 1.0)).unwrap();
        let g_scaled = grad_expectation_wrt_angles(&req(angles, alpha)).unwrap();
        for i in 0..g.len() {
            prop_assert!((g[i] - g_shift[i]).abs() < 1e-10);
            prop_assert!((alpha * g[i] - g_scaled[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn bce_is_nonnegative_and_finite(p in 0.0..=1.0f64, y in 0u8..=1) {
        let (l, d) = bce_loss(p, f64::from(y));
        prop_assert!(l >= 0.0 && l.is_finite() && d.is_finite());
    }

    #[test]
    fn datasets_are_balanced_and_reproducible(half in 1usize..60, noise in 0.0..0.5f64, seed in any::<u64>()) {
        let n = 2 * half;
        for ds in [
            make_moons(n, noise, &mut Prng::new(seed, 1)).unwrap(),
            make_circles(n, noise, 0.5, &mut Prng::new(seed, 1)).unwrap(),
        ] {
            prop_assert_eq!(ds.len(), n);
            prop_assert_eq!(ds.labels.iter().filter(|l| **l == 1).count(), half);
        }
        prop_assert_eq!(
            make_moons(n, noise, &mut Prng::new(seed, 1)).unwrap(),
            make_moons(n, noise, &mut Prng::new(seed, 1)).unwrap()
        );
    }

    #[test]
    fn standardized_training_features(seed in any::<u64>()) {
        let ds = make_moons(300, 0.2, &mut Prng::new(seed, 1)).unwrap();
        let (train, test, _) = split_and_standardize(&ds, 200, 100, &mut Prng::new(seed, 2)).unwrap();
        prop_assert_eq!((train.len(), test.len()), (200, 100));
        for j in 0..2 {
            let col: Vec<f64> = train.features.iter().map(|x| x[j]).collect();
            let mean = col.iter().sum::<f64>() / 200.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 200.0;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn programmed_observable_depends_on_input(
        kind in prop::sample::select(vec![VariantKind::FwpObservable, VariantKind::FwpBoth]),
        seed in any::<u64>(),
        x1 in prop::collection::vec(-2.0..2.0f64, 2),
        x2 in prop::collection::vec(-2.0..2.0f64, 2),
    ) {
        prop_assume!(x1.iter().zip(&x2).any(|(a, b)| (a - b).abs() > 1e-3));
        let mut spec = ModelSpec::new(kind, AnsatzConfig::new(2, 1).unwrap(), 2);
        spec.latent_dim = 4;
        let m = Model::init(spec, &mut Prng::new(seed, 3)).unwrap();
        let b1 = m.emitted_observable(&x1).unwrap().unwrap();
        let b2 = m.emitted_observable(&x2).unwrap().unwrap();
        prop_assert!(b1.iter().zip(&b2).any(|(a, b)| (a - b).abs() > 1e-12));
    }

    #[test]
    fn scaling_observable_pushes_probability_outward(seed in any::<u64>(), alpha in 1.01..5.0f64, x in prop::collection::vec(-2.0..2.0f64, 2)) {
        let mut spec = ModelSpec::new(VariantKind::VqcLearnObs, AnsatzConfig::new(2, 1).unwrap(), 2);
        spec.latent_dim = 4;
        let mut m = Model::init(spec, &mut Prng::new(seed, 3)).unwrap();
        let (p1, c1) = m.forward(&x).unwrap();
        let n_theta = spec.ansatz.param_count();
        let mut flat = m.flat_params();
        flat[n_theta..].iter_mut().for_each(|v| *v *= alpha);
        m.set_flat_params(&flat).unwrap();
        let (p2, c2) = m.forward(&x).unwrap();
        prop_assert!((c2.expectation - alpha * c1.expectation).abs() < 1e-12 * (1.0 + c2.expectation.abs()));
        if c1.expectation > 0.0 {
            prop_assert!(p2 >= p1);
        } else {
            prop_assert!(p2 <= p1);
        }
    }
}
