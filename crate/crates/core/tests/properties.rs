//! Property-based invariants across modules.

use proptest::prelude::*;

use nested_karlin::kernels::{
    b_constants, binomial_identity_lhs, binomial_split, convolution_identity, poisson_split, poisson_tail, psi,
};
use nested_karlin::limits::{cov_x, cov_z, cross_z, LimitCovQuery, LimitKind};
use nested_karlin::moments::{cov_k_cross_level, mean_k, EnumOptions};
use nested_karlin::scheme::{simulate_deterministic, simulate_poissonized, SchemeShape};
use nested_karlin::weights::WeightFamily;

fn family_strategy() -> impl Strategy<Value = WeightFamily> {
    prop_oneof![
        (0.35f64..0.9).prop_map(|a| WeightFamily::weibull(a).unwrap()),
        (0.05f64..0.9).prop_map(|p| WeightFamily::geometric(p).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn convolution_sides_agree(a in 0u64..=30, r in 0u64..=30, n in 0u64..=30) {
        let (lhs, rhs) = convolution_identity(a, r, n).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn binomial_identity_is_reciprocal(l in 1u32..=12, a in 1e-3f64..=10.0, b in 1e-3f64..=10.0) {
        let v = binomial_identity_lhs(l, a, b);
        prop_assert!((v * l as f64 - 1.0).abs() <= 1e-12, "l={} a={} b={} v={}", l, a, b, v);
        // symmetric in (a, b)
        prop_assert!((v - binomial_identity_lhs(l, b, a)).abs() <= 1e-15);
    }

    #[test]
    fn poisson_split_partitions_unity(l in 0u32..40, m in 0.0f64..200.0) {
        let (below, tail) = poisson_split(l, m);
        prop_assert!((below + tail - 1.0).abs() <= 1e-13);
        prop_assert!((0.0..=1.0).contains(&below) && (0.0..=1.0).contains(&tail));
        // adding the l-th mass moves it from the tail to the lower part
        let next = poisson_tail(l + 1, m);
        prop_assert!((tail - psi(l, m) - next).abs() <= 1e-13);
    }

    #[test]
    fn binomial_split_partitions_unity(n in 0u64..500, p in 0.0f64..=1.0, l in 0u64..20) {
        let (below, tail) = binomial_split(n, p, l);
        prop_assert!((below + tail - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rho_is_nondecreasing(fam in family_strategy(), t in 1.0f64..1e6, step in 1.0f64..100.0) {
        prop_assert!(fam.rho(t).unwrap() <= fam.rho(t * step).unwrap());
        prop_assert_eq!(fam.rho(0.5).unwrap(), 0);
    }

    #[test]
    fn tail_bound_dominates_remainder(fam in family_strategy(), k in 1usize..200) {
        let table = fam.table();
        prop_assume!(k + 1 < table.len());
        let remainder: f64 = table[k..].iter().rev().sum();
        let bound = fam.tail_mass_bound(k).unwrap();
        prop_assert!(bound >= remainder * (1.0 - 1e-12), "k={} bound={} remainder={}", k, bound, remainder);
        prop_assert!(fam.tail_mass_bound(k + 1).unwrap() <= bound);
    }

    #[test]
    fn trajectories_are_consistent(
        fam in family_strategy(),
        seed in any::<u64>(),
        n in 0u64..400,
        jj in 1usize..4,
        ll in 1usize..5,
    ) {
        let shape = SchemeShape::new(jj, ll).unwrap();
        let grid: Vec<u64> = (0..=4).map(|k| n * k / 4).collect();
        let tr = simulate_deterministic(&fam, n, shape, &grid, seed, 3).unwrap();
        tr.check_invariants().unwrap();
        for i in 0..tr.len() {
            for j in 1..=jj {
                // deeper generations refine shallower ones
                if j > 1 {
                    prop_assert!(tr.k(j, 1, i) >= tr.k(j - 1, 1, i));
                }
                for l in 1..=ll {
                    prop_assert!(tr.k(j, l + 1, i) <= tr.k(j, l, i));
                    if i > 0 {
                        prop_assert!(tr.k(j, l, i) >= tr.k(j, l, i - 1));
                    }
                }
            }
        }
        let times = [0.0, 1.0, (n as f64).max(1.0)];
        simulate_poissonized(&fam, &times, shape, seed, 0).unwrap().check_invariants().unwrap();
    }

    #[test]
    fn cov_z_even_and_decreasing(l in 1u32..10, d in 0.0f64..6.0, e in 0.0f64..1.0) {
        prop_assert!((cov_z(l, d) - cov_z(l, -d)).abs() <= 1e-15);
        prop_assert!(cov_z(l, d + e) <= cov_z(l, d) + 1e-15);
        prop_assert!(cov_z(l, d) >= 0.0);
        prop_assert!((cross_z(l, 0, d) - cov_z(l, d)).abs() <= 1e-14);
        prop_assert!((cov_x(l, d) - cov_x(l, -d)).abs() <= 1e-15);
    }

    #[test]
    fn holder_increment(l in 1u32..12, d in 0.0f64..8.0) {
        prop_assert!(2.0 * (b_constants(l).0 - cov_z(l, d)) <= d + 1e-15);
    }

    #[test]
    fn limit_queries_are_symmetric(kind in prop_oneof![Just(LimitKind::Z), Just(LimitKind::X)],
                                   l1 in 1u32..6, l2 in 1u32..6, d in -4.0f64..4.0) {
        let a = LimitCovQuery::new(kind, l1, l2, d).unwrap().closed_form();
        let b = LimitCovQuery::new(kind, l2, l1, -d).unwrap().closed_form();
        prop_assert!((a - b).abs() <= 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn halving_eps_stays_within_certificates(alpha in 0.3f64..0.8, t in 10.0f64..3000.0, l in 1u32..4) {
        let w = WeightFamily::weibull(alpha).unwrap();
        let coarse = mean_k(&w, 2, l, t, &EnumOptions::with_eps(1e-6)).unwrap();
        let fine = mean_k(&w, 2, l, t, &EnumOptions::with_eps(5e-7)).unwrap();
        prop_assert!(fine.error_bound <= coarse.error_bound);
        prop_assert!(fine.boxes_enumerated >= coarse.boxes_enumerated);
        prop_assert!((fine.value - coarse.value).abs() <= coarse.error_bound + fine.error_bound);
    }

    #[test]
    fn cross_level_covariance_is_symmetric(s in 1.0f64..500.0, t in 1.0f64..500.0, l1 in 1u32..4, l2 in 1u32..4) {
        let w = WeightFamily::geometric(0.3).unwrap();
        let o = EnumOptions::default();
        let a = cov_k_cross_level(&w, 1, l1, s, l2, t, &o).unwrap();
        let b = cov_k_cross_level(&w, 1, l2, t, l1, s, &o).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-12 * a.value.abs().max(1.0));
    }
}
