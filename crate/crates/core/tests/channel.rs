use mimo_jscc::channel::*;
use proptest::prelude::*;
use rand::SeedableRng;

fn matrix(rows: usize, cols: usize, values: &[f64]) -> ComplexMatrix<f64> {
    let n = rows * cols;
    ComplexMatrix::new(rows, cols, values[..n].to_vec(), values[n..2 * n].to_vec()).unwrap()
}

fn dims_and_values() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..7, 1usize..7).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            prop::collection::vec(-3.0f64..3.0, 2 * r * c),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_and_is_unitary((r, c, v) in dims_and_values()) {
        let h = matrix(r, c, &v);
        let f = svd(&h).unwrap();
        let scale = h.frobenius().max(1.0);
        prop_assert!(f.reconstruct().sub(&h).unwrap().frobenius() / scale < 1e-10);
        prop_assert!(f.u.conj_transpose().matmul(&f.u).unwrap().distance_from_identity() < 1e-10);
        prop_assert!(f.v.conj_transpose().matmul(&f.v).unwrap().distance_from_identity() < 1e-10);
        prop_assert_eq!(f.s.len(), r.min(c));
        prop_assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(f.s.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn power_normalize_gives_unit_mean_power((r, c, v) in dims_and_values()) {
        let z = matrix(r, c, &v);
        prop_assume!(z.frobenius() > 1e-6);
        let p = power_normalize(&z).unwrap();
        prop_assert!((p.mean_power() - 1.0).abs() < 1e-12);
        // idempotent
        prop_assert!(power_normalize(&p).unwrap().sub(&p).unwrap().frobenius() < 1e-12);
    }

    #[test]
    fn bridge_round_trips_bitwise((r, c, v) in dims_and_values()) {
        let z = matrix(r, c, &v);
        let t = to_bridge(&z);
        prop_assert_eq!(t.shape(), &[r, 2 * c][..]);
        prop_assert_eq!(from_bridge(&t).unwrap(), z);
    }

    #[test]
    fn perfect_csi_link_is_diagonal(seed in any::<u64>(), n in 1usize..6, d in 1usize..5) {
        let mut rng = ChannelRng::seed_from_u64(seed);
        let h: ComplexMatrix<f64> = sample_rayleigh(n, n, &mut rng);
        let f = svd(&h).unwrap();
        let z: ComplexMatrix<f64> = sample_complex_gaussian(n, d, 1.0, &mut rng);
        let rx = transmit(&precode(&z, &f.v).unwrap(), &h, 0.0, &mut rng).unwrap();
        let y = equalize(&rx, &f.u).unwrap();
        let expect = ComplexMatrix::diag(n, n, &f.s).matmul(&z).unwrap();
        prop_assert!(y.sub(&expect).unwrap().frobenius() < 1e-9 * expect.frobenius().max(1.0));
    }

    #[test]
    fn zero_error_estimate_is_bitwise_the_channel(seed in any::<u64>()) {
        let mut rng = ChannelRng::seed_from_u64(seed);
        let h: ComplexMatrix<f64> = sample_rayleigh(3, 4, &mut rng);
        let r = inject_estimation_error(&h, 0.0, &mut rng).unwrap();
        prop_assert_eq!(&r.h_est, &h);
        prop_assert_eq!(r.perfect().h_est, h);
    }

    #[test]
    fn derived_seeds_are_deterministic_and_order_sensitive(a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(derive_seed(&[a, b]), derive_seed(&[a, b]));
        if a != b {
            prop_assert_ne!(derive_seed(&[a, b]), derive_seed(&[b, a]));
        }
    }
}

#[test]
fn snr_maps_to_noise_variance() {
    assert_eq!(snr_to_noise_var(0.0, 1.0), 1.0);
    assert!((snr_to_noise_var(10.0, 1.0) - 0.1).abs() < 1e-15);
    assert!((snr_to_noise_var(-3.0, 2.0) - 2.0 * 10f64.powf(0.3)).abs() < 1e-12);
}

#[test]
fn invalid_variances_and_shapes_are_rejected() {
    let mut rng = ChannelRng::seed_from_u64(0);
    let h: ComplexMatrix<f64> = sample_rayleigh(2, 2, &mut rng);
    assert!(matches!(
        inject_estimation_error(&h, -0.1, &mut rng),
        Err(mimo_jscc::ChannelError::NegativeVariance(_))
    ));
    assert!(transmit(&h, &h, f64::NAN, &mut rng).is_err());
    let wide: ComplexMatrix<f64> = sample_rayleigh(3, 2, &mut rng);
    assert!(equalize(&h, &wide).is_err());
    assert!(power_normalize(&ComplexMatrix::<f64>::zeros(2, 2)).is_err());
}

#[test]
fn same_seed_gives_same_realization_across_precisions() {
    let a = sample_realization::<f64>(4, 4, 0.05, 10.0, 17).unwrap();
    let b = sample_realization::<f64>(4, 4, 0.05, 10.0, 17).unwrap();
    assert_eq!(a, b);
    let c = sample_realization::<f32>(4, 4, 0.05, 10.0, 17).unwrap();
    for (x, y) in a.h_est.re().iter().zip(c.h_est.re()) {
        assert!((x - *y as f64).abs() < 1e-6);
    }
    assert!((a.sigma_n_sq - 0.1).abs() < 1e-15);
}
