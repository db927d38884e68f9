use proptest::prelude::*;
use qsde::combinatorics::{count_even_tuples, double_factorial};
use qsde::estimator::{plan_multi_time, plan_terminal, sample_average_bound, Accuracy, ObservableTensor};
use qsde::model::builtin;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frobenius_norm_is_cached_exactly(vals in prop::collection::vec(-10.0f64..10.0, 1..12)) {
        let entries: Vec<(Vec<usize>, f64)> = vals.iter().enumerate().map(|(i, v)| (vec![i % 4, i / 4], *v)).collect();
        prop_assume!(vals.iter().any(|v| *v != 0.0));
        let c = ObservableTensor::new(2, entries, false).unwrap();
        let sq: f64 = vals.iter().map(|v| v * v).sum();
        prop_assert!((c.frob_norm.powi(2) - sq).abs() <= 1e-12 * sq.max(1.0));
    }

    #[test]
    fn dyson_plans_respect_their_invariants(eps_rel in 0.05f64..0.99, delta in 0.01f64..0.99, d in 1usize..3) {
        let p = builtin("ou").unwrap();
        let c = ObservableTensor::terminal_power(d, 0);
        for plan in [
            plan_multi_time(&p, &c, Accuracy::Relative(eps_rel), delta),
            plan_terminal(&p, &c, Accuracy::Relative(eps_rel), delta),
        ] {
            let plan = match plan {
                Ok(v) => v,
                // Only the sample-count ceiling may refuse a relative-accuracy plan.
                Err(e) => { prop_assert!(e.to_string().contains("samples")); continue; }
            };
            prop_assert!(plan.eps_prime <= 1.0 / 3.0);
            prop_assert_eq!(plan.delta_prime, delta / 2.0);
            prop_assert!(plan.n_s as f64 >= 2.0 / (plan.delta_prime * plan.eps_prime.powi(2)) * (1.0 - 1e-12));
            prop_assert!(plan.eps_oe > 0.0 && plan.eps_oe * plan.rescale <= plan.eps / 2.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn concentration_bound_shrinks_with_samples(n in 10u64..100_000) {
        let p = builtin("ou").unwrap();
        let c = ObservableTensor::terminal_power(1, 0);
        let plan = plan_multi_time(&p, &c, Accuracy::Relative(0.5), 0.2).unwrap();
        let a = sample_average_bound(&p, &plan, plan.eps_prime, n, 0.2);
        let b = sample_average_bound(&p, &plan, plan.eps_prime, 4 * n, 0.2);
        prop_assert!(b < a);
    }

    #[test]
    fn even_tuple_counts_respect_bound(k in 1u32..7, l in 1u32..9) {
        let count = count_even_tuples(k, l).unwrap();
        prop_assert!(count <= double_factorial(2 * k as i64 - 1) * (l as u128).pow(k));
        prop_assert!(count >= l as u128);
    }
}
