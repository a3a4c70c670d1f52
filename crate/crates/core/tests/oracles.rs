//! Numeric values checked against independent computations.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use nested_karlin::harness::{run_clt_check, run_moment_check, ExperimentConfig};
use nested_karlin::kernels::{binomial_tail, convolution_identity, psi};
use nested_karlin::limits::{cov_z, LimitCovQuery, LimitKind};
use nested_karlin::moments::{cov_k_cross_gen, cov_k_same, mean_k, EnumOptions};
use nested_karlin::weights::WeightFamily;

fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn big_binom(n: u64, k: u64) -> BigInt {
    (0..k).fold(BigInt::one(), |acc, i| acc * BigInt::from(n - i) / BigInt::from(i + 1))
}

/// Poisson pmf table by the forward recurrence.
fn pmf(mean: f64, len: usize) -> Vec<f64> {
    let mut out = vec![(-mean).exp()];
    for k in 1..len {
        out.push(out[k - 1] * mean / k as f64);
    }
    out
}

#[test]
fn psi_deep_in_the_tail() {
    let oracle = (-700.0 + 5.0 * 700f64.ln() - 120f64.ln()).exp();
    let v = psi(5, 700.0);
    assert!((v / oracle - 1.0).abs() < 1e-12, "{v} vs {oracle}");
}

#[test]
fn binomial_tail_matches_exact_rational() {
    let p = ratio(1, 100);
    let q = ratio(99, 100);
    let mut below = BigRational::zero();
    for k in 0..3u64 {
        let mut term = BigRational::from_integer(big_binom(100, k));
        for _ in 0..k {
            term *= &p;
        }
        for _ in 0..(100 - k) {
            term *= &q;
        }
        below += term;
    }
    let exact = (BigRational::one() - below).to_f64().unwrap();
    let v = binomial_tail(100, 0.01, 3);
    assert!((v / exact - 1.0).abs() <= 1e-13, "{v} vs {exact}");
    assert!((v - 0.0793732).abs() < 1e-7);
}

#[test]
fn convolution_against_big_integers() {
    for &(a, r, n) in &[(30u64, 30u64, 30u64), (17, 4, 9), (0, 12, 5), (25, 0, 25)] {
        let (lhs, rhs) = convolution_identity(a, r, n).unwrap();
        let oracle: BigInt = (0..=n).map(|k| big_binom(a + k, a) * big_binom(r + n - k, r)).sum();
        assert_eq!(BigInt::from(lhs), oracle);
        assert_eq!(BigInt::from(rhs), big_binom(a + r + n + 1, n));
    }
}

#[test]
fn weibull_normalizer_by_brute_force() {
    let w = WeightFamily::weibull(0.5).unwrap();
    // the tail beyond 1e6 terms is about 2 * 1000 * e^{-1000}
    let s: f64 = (1..=1_000_000u64).rev().map(|k| (-(k as f64).sqrt()).exp()).sum();
    assert!((w.normalizer() - 1.0 / s).abs() < 1e-13, "{} vs {}", w.normalizer(), 1.0 / s);
}

#[test]
fn tail_bound_dominates_brute_remainder() {
    let w = WeightFamily::weibull(0.5).unwrap();
    let c = w.normalizer();
    let remainder: f64 = (101..=2_000_000u64).rev().map(|k| c * (-(k as f64).sqrt()).exp()).sum();
    let bound = w.tail_mass_bound(100).unwrap();
    assert!(bound >= remainder);
    assert!(bound <= 1.5 * remainder, "bound {bound} is loose against {remainder}");
}

#[test]
fn rho_below_smallest_reciprocal_is_zero() {
    for w in [WeightFamily::weibull(0.5).unwrap(), WeightFamily::geometric(0.5).unwrap()] {
        assert_eq!(w.rho(0.5).unwrap(), 0);
        assert_eq!(w.rho(1.0).unwrap(), 0);
    }
}

#[test]
fn dehaan_ratio_at_huge_time() {
    let w = WeightFamily::weibull(0.5).unwrap();
    let e = std::f64::consts::E;
    let rows = w.dehaan_profile(&[e], &[400f64.exp()]).unwrap();
    assert!((rows[0].value - 1.0).abs() < 0.15, "{:?}", rows[0]);
    assert_eq!(rows[0].target, 1.0);
}

#[test]
fn mean_matches_direct_loop() {
    let p = 0.3;
    let w = WeightFamily::geometric(p).unwrap();
    let t = 50.0;
    for l in 1..=3u32 {
        let mut direct = 0.0;
        for k in 1..200 {
            let m = t * (1.0 - p) * p.powi(k - 1);
            let below: f64 = pmf(m, l as usize).iter().sum();
            direct += 1.0 - below;
        }
        let est = mean_k(&w, 1, l, t, &EnumOptions::default()).unwrap();
        assert!((est.value - direct).abs() <= est.error_bound + 1e-12, "l={l}: {} vs {direct}", est.value);
    }
}

#[test]
fn same_level_covariance_matches_direct_loop() {
    let p = 0.4;
    let w = WeightFamily::geometric(p).unwrap();
    let (s, t, l) = (20.0, 35.0, 2usize);
    let mut direct = 0.0;
    for k in 1..200 {
        let pk = (1.0 - p) * p.powi(k - 1);
        // P(N_s >= l, N_t >= l) - P(N_s >= l) P(N_t >= l) for one box
        let a: f64 = 1.0 - pmf(pk * s, l).iter().sum::<f64>();
        let b: f64 = 1.0 - pmf(pk * t, l).iter().sum::<f64>();
        direct += a * (1.0 - b);
    }
    let est = cov_k_same(&w, 1, l as u32, s, t, &EnumOptions::default()).unwrap();
    assert!((est.value - direct).abs() <= est.error_bound + 1e-12, "{} vs {direct}", est.value);
}

/// Two-box family: the generation-1 count of box `a` and its child `(a, b)`
/// are built from independent Poisson pieces.
fn two_box_cross_gen(probs: [f64; 2], l: usize, n: usize, s: f64, t: f64) -> f64 {
    let m = s.min(t);
    let len = 80;
    let mut total = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let pab = probs[a] * probs[b];
            let px = pmf(pab * m, len);
            let py = pmf((probs[a] - pab) * m, len);
            let pw = pmf(probs[a] * (s - m), len);
            let pz = pmf(pab * (t - m), len);
            let (mut joint, mut first, mut second) = (0.0, 0.0, 0.0);
            for (x, &fx) in px.iter().enumerate() {
                for (y, &fy) in py.iter().enumerate() {
                    for (w, &fw) in pw.iter().enumerate() {
                        for (z, &fz) in pz.iter().enumerate() {
                            let pr = fx * fy * fw * fz;
                            let g1 = x + y + w >= l;
                            let g2 = x + z >= n;
                            if g1 {
                                first += pr;
                            }
                            if g2 {
                                second += pr;
                            }
                            if g1 && g2 {
                                joint += pr;
                            }
                        }
                    }
                }
            }
            total += joint - first * second;
        }
    }
    total
}

#[test]
fn cross_generation_covariance_two_boxes() {
    let probs = [0.3, 0.7];
    let w = WeightFamily::finite(probs.to_vec()).unwrap();
    let o = EnumOptions::default();
    for &(l, n, s, t) in &[(1u32, 1u32, 2.0, 2.0), (2, 1, 1.5, 4.0), (1, 2, 5.0, 3.0)] {
        let oracle = two_box_cross_gen(probs, l as usize, n as usize, s, t);
        let est = cov_k_cross_gen(&w, 1, 2, l, n, s, t, &o).unwrap();
        assert!((est.value - oracle).abs() <= 1e-12 + est.error_bound, "l={l} n={n} s={s} t={t}: {} vs {oracle}", est.value);
    }
}

/// Composite Simpson on a uniform grid.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn level_one_covariance_by_simpson() {
    // the level-1 profile is exp(-e^{-(x-u)}); the covariance integrates min - product
    let h = |x: f64, u: f64| (-(-(x - u)).exp()).exp();
    for &d in &[0.0, 0.5, 1.0, 3.0] {
        let v = simpson(|x| h(x, d).min(h(x, 0.0)) - h(x, d) * h(x, 0.0), -40.0, 40.0, 80_000);
        assert!((cov_z(1, d) - v).abs() < 1e-9, "delta={d}: {} vs {v}", cov_z(1, d));
    }
    assert!((cov_z(1, 0.0) - 2f64.ln()).abs() < 1e-14);
}

#[test]
fn closed_forms_against_adaptive_quadrature() {
    for kind in [LimitKind::Z, LimitKind::X] {
        for l1 in 1..=3 {
            for l2 in 1..=3 {
                for &d in &[-1.0, 0.0, 0.75, 2.5] {
                    let q = LimitCovQuery::new(kind, l1, l2, d).unwrap();
                    let (c, n) = (q.closed_form(), q.quadrature().unwrap());
                    assert!((c - n).abs() < 1e-9, "{kind:?} {l1} {l2} {d}: {c} vs {n}");
                }
            }
        }
    }
}

#[test]
fn moment_check_smoke() {
    let mut config = ExperimentConfig::moment_default();
    config.replicas = 100;
    config.t_grid = vec![200.0];
    let started = std::time::Instant::now();
    let report = run_moment_check(&config).unwrap();
    assert!(started.elapsed().as_secs_f64() < 10.0);
    assert!(report.checked().count() > 0);
}

#[test]
fn clt_check_at_log_time_eight() {
    let config = ExperimentConfig::clt_default();
    assert_eq!(config.replicas, 4000);
    let report = run_clt_check(&config).unwrap();
    assert!(report.passed, "{}", report.summary());
}
