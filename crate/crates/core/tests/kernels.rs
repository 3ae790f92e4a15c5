mod common;

use common::min_eigenvalue;
use proptest::prelude::*;
use txforce::kernel::{causal_force_kernel, gram, ou_kernel, periodic_kernel, se_kernel};
use txforce::KernelSpec;

fn stationary_spec() -> impl Strategy<Value = KernelSpec> {
    prop_oneof![
        (0.1f64..3.0, 0.1f64..10.0).prop_map(|(sigma, length_scale)| KernelSpec::Se { sigma, length_scale }),
        (0.1f64..3.0, 0.1f64..10.0).prop_map(|(sigma, length_scale)| KernelSpec::Ou { sigma, length_scale }),
        (0.1f64..3.0, 0.2f64..5.0, 0.5f64..30.0).prop_map(|(sigma, length_scale, period)| KernelSpec::Periodic {
            sigma,
            length_scale,
            period
        }),
    ]
}

fn any_spec() -> impl Strategy<Value = KernelSpec> {
    prop_oneof![
        stationary_spec(),
        (0.1f64..10.0, -20.0f64..20.0).prop_map(|(length_scale, mark_time)| KernelSpec::CausalForce {
            length_scale,
            mark_time
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn gram_is_positive_semidefinite(spec in any_spec(), times in prop::collection::vec(-50.0f64..50.0, 20)) {
        let k = gram(&spec, &times, &times).unwrap();
        let floor = -1e-8 * k.diagonal().max();
        prop_assert!(min_eigenvalue(&k) >= floor, "{spec:?}: {}", min_eigenvalue(&k));
    }
}

proptest! {
    #[test]
    fn kernels_are_symmetric(spec in any_spec(), t in -100.0f64..100.0, t2 in -100.0f64..100.0) {
        prop_assert_eq!(spec.eval(t, t2), spec.eval(t2, t));
    }

    #[test]
    fn stationary_kernels_depend_only_on_the_gap(
        spec in stationary_spec(),
        t in -50.0f64..50.0,
        t2 in -50.0f64..50.0,
        shift in -100.0f64..100.0,
    ) {
        let a = spec.eval(t, t2);
        let b = spec.eval(t + shift, t2 + shift);
        // Shifting both inputs rounds the gap by at most a few ulps of |t| + |shift|.
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn stationary_kernels_are_bounded_by_the_variance(
        spec in stationary_spec(),
        t in -20.0f64..20.0,
        t2 in -20.0f64..20.0,
    ) {
        let k = spec.eval(t, t2);
        prop_assert!(k <= spec.eval(t, t));
        prop_assert!(k >= 0.0);
    }

    #[test]
    fn causal_kernel_lies_in_unit_interval(t in -30.0f64..30.0, t2 in -30.0f64..30.0, mark in -10.0f64..10.0, ell in 0.1f64..10.0) {
        let k = causal_force_kernel(t, t2, mark, ell).unwrap();
        prop_assert!(k >= 0.0 && k <= 1.0);
    }

    #[test]
    fn causal_kernel_is_flat_before_the_mark(mark in -10.0f64..10.0, a in 0.0f64..30.0, b in 0.0f64..30.0, ell in 0.1f64..10.0) {
        prop_assert_eq!(causal_force_kernel(mark - a, mark - b, mark, ell).unwrap(), 1.0);
    }
}

#[test]
fn bounds_are_strict_for_nearby_points() {
    for (t, t2) in [(0.0, 0.5), (3.0, -1.0), (-4.0, -4.25)] {
        assert!(se_kernel(t, t2, 1.3, 2.0).unwrap() > 0.0);
        assert!(ou_kernel(t, t2, 1.3, 2.0).unwrap() > 0.0);
        assert!(periodic_kernel(t, t2, 1.3, 2.0, 7.0).unwrap() > 0.0);
        assert!(causal_force_kernel(t, t2, -2.0, 1.5).unwrap() > 0.0);
    }
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    assert!(se_kernel(0.0, 1.0, 1.0, 0.0).is_err());
    assert!(ou_kernel(0.0, 1.0, -1.0, 1.0).is_err());
    assert!(periodic_kernel(0.0, 1.0, 1.0, 1.0, 0.0).is_err());
    assert!(causal_force_kernel(0.0, 1.0, f64::NAN, 1.0).is_err());
}
