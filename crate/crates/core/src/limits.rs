//! Covariances of the stationary Gaussian limit processes `Z_l`, `X_l` and of
//! the Gaussian variables `Y_l = X_l(0)`, in closed form and by quadrature of
//! their white-noise integral representations.
//!
//! Offset conventions differ between the individual formulas, so each function
//! states which variable sits at `u` and how `delta` is formed. The unified
//! [`LimitCovQuery`] always means `E P_{l1}(u) P_{l2}(v)` with `delta = u - v`.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::kernels::{binom_u128, ln_fact, ln_psi, KahanSum};
use crate::quad;

/// Half-width of the quadrature window in the `x` variable.
pub const QUAD_WINDOW: f64 = 40.0;
/// Tolerance requested from each elementary quadrature.
pub const QUAD_TOL: f64 = 1e-12;
/// Largest level accepted by the quadrature oracle.
pub const QUAD_MAX_LEVEL: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LimitKind {
    /// At-least-`l` processes.
    Z,
    /// Exactly-`l` processes, `X_l = Z_l - Z_{l+1}`.
    X,
    /// Time-zero marginals `Y_l = X_l(0)`; `delta` is ignored.
    Y,
}

impl FromStr for LimitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Z" | "z" => Ok(LimitKind::Z),
            "X" | "x" => Ok(LimitKind::X),
            "Y" | "y" => Ok(LimitKind::Y),
            other => Err(invalid(format!("unknown limit kind {other:?}, expected Z, X or Y"))),
        }
    }
}

impl fmt::Display for LimitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LimitKind::Z => "Z",
            LimitKind::X => "X",
            LimitKind::Y => "Y",
        };
        f.write_str(s)
    }
}

/// `E P_{l1}(u) P_{l2}(v)` with `delta = u - v`, for `P` one of `Z`, `X`, `Y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitCovQuery {
    pub kind: LimitKind,
    pub l1: u32,
    pub l2: u32,
    pub delta: f64,
}

impl LimitCovQuery {
    pub fn new(kind: LimitKind, l1: u32, l2: u32, delta: f64) -> Result<Self> {
        if l1 == 0 || l2 == 0 {
            return Err(invalid("levels must be positive"));
        }
        if !delta.is_finite() {
            return Err(invalid("delta must be finite"));
        }
        Ok(LimitCovQuery { kind, l1, l2, delta })
    }

    pub fn closed_form(&self) -> f64 {
        let (l1, l2, d) = (self.l1, self.l2, self.delta);
        match self.kind {
            LimitKind::Z => {
                if l1 <= l2 {
                    cross_z(l1, l2 - l1, d)
                } else {
                    cross_z(l2, l1 - l2, -d)
                }
            }
            LimitKind::X => x_pair(l1, l2, d),
            LimitKind::Y => cov_y(l1, l2),
        }
    }

    pub fn quadrature(&self) -> Result<f64> {
        quadrature_cov(self.kind, self.l1, self.l2, self.delta)
    }
}

/// `w = e^{-|d|} / (1 + e^{-|d|})^2`.
fn logistic_weight(delta: f64) -> f64 {
    let e = (-delta.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// `Cov(Z_l(u), Z_l(v))` as a function of `delta = u - v`.
pub fn cov_z(l: u32, delta: f64) -> f64 {
    assert!(l >= 1, "level must be positive");
    let w = logistic_weight(delta);
    let mut s = KahanSum::new();
    s.add((-delta.abs()).exp().ln_1p());
    // C(2k,k)/(2k) w^k, advanced by the ratio of consecutive central binomials
    let mut central = 2.0 * w; // C(2,1) w
    for k in 1..l {
        s.add(-central / (2 * k) as f64);
        central *= w * ((2 * k + 1) * (2 * k + 2)) as f64 / ((k + 1) * (k + 1)) as f64;
    }
    s.value()
}

/// `E Z_l(u) Z_{l+n}(v)` with `delta = u - v`.
pub fn cross_z(l: u32, n: u32, delta: f64) -> f64 {
    assert!(l >= 1, "level must be positive");
    let mut s = KahanSum::new();
    s.add(cov_z(l, delta));
    // sigma^i (1-sigma)^m = e^{delta i} / (1+e^delta)^{m+i}
    let ln_sigma = -(-delta).exp().ln_1p();
    let ln_one_minus = -delta.exp().ln_1p();
    let pos = -delta.exp_m1(); // 1 - e^delta
    for r in 0..n {
        let m = l + r;
        for i in 0..l {
            let lc = ln_fact(m as u64) - ln_fact(i as u64) - ln_fact((m - i) as u64);
            if pos > 0.0 {
                let ln_term = lc + (m - i) as f64 * pos.ln() + delta * i as f64;
                s.add(ln_term.exp() / m as f64);
            }
            let lc2 = ln_fact((m + i) as u64) - ln_fact(i as u64) - ln_fact(m as u64);
            let ln_term = lc2 + i as f64 * ln_sigma + m as f64 * ln_one_minus;
            s.add(-ln_term.exp() / (m + i) as f64);
        }
    }
    s.value()
}

/// `C(n, k)` as a float; exact while it fits in 128 bits.
fn choose(n: u32, k: u32) -> f64 {
    match binom_u128(n as u64, k as u64) {
        Some(c) => c as f64,
        None => (ln_fact(n as u64) - ln_fact(k as u64) - ln_fact((n - k) as u64)).exp(),
    }
}

/// `Cov(X_l(u), X_l(v)) = e^{-|d| l} (1/l - C(2l,l) / (2l (1 + e^{-|d|})^{2l}))`
/// with `d = u - v`.
pub fn cov_x(l: u32, delta: f64) -> f64 {
    assert!(l >= 1, "level must be positive");
    let a = delta.abs();
    let lf = l as f64;
    // C(2l,l)/2 / (1+e^{-a})^{2l}; reduces to b*_l at a = 0
    let inner = choose(2 * l, l) / 2.0 * (-2.0 * lf * (-a).exp().ln_1p()).exp();
    (-a * lf).exp() / lf * (1.0 - inner)
}

/// `E X_{l1}(u) X_{l2}(v)` for `l1 > l2 >= 0` with `delta = v - u`; `X_0 = -Z_1`.
pub fn cross_x(l1: u32, l2: u32, delta: f64) -> f64 {
    assert!(l1 > l2, "cross_x needs l1 > l2");
    let pos = -delta.exp_m1();
    let first = if pos > 0.0 {
        choose(l1, l2) * ((l1 - l2) as f64 * pos.ln() + delta * l2 as f64).exp() / l1 as f64
    } else {
        0.0
    };
    let m = l1 + l2;
    let decay = if delta.abs() < 30.0 {
        // direct powers keep dyadic values such as 2^{-m} at delta = 0 exact
        (delta * l2 as f64).exp() / (1.0 + delta.exp()).powi(m as i32)
    } else {
        (delta * l2 as f64 - m as f64 * delta.exp().ln_1p()).exp()
    };
    first - choose(m, l2) * decay / m as f64
}

/// `E X_a(u) X_b(v)` for `a, b >= 0` with `delta = u - v`, where `X_0 = -Z_1`.
pub fn x_pair(a: u32, b: u32, delta: f64) -> f64 {
    use std::cmp::Ordering::*;
    match a.cmp(&b) {
        Equal if a == 0 => cov_z(1, delta),
        Equal => cov_x(a, delta),
        Greater => cross_x(a, b, -delta),
        Less => cross_x(b, a, delta),
    }
}

/// Moments of `Y_l = X_l(0)`.
pub fn cov_y(l1: u32, l2: u32) -> f64 {
    assert!(l1 >= 1 && l2 >= 1, "levels must be positive");
    if l1 == l2 {
        return crate::kernels::b_constants(l1).1;
    }
    let m = l1 + l2;
    -choose(m, l1) * 0.5f64.powi(m as i32) / m as f64
}

/// Integrand of `E X_a(u) X_b(v)` from the white-noise representation: the
/// probability that a box of log-weight `-x` holds exactly `a` balls at time
/// `e^u` and exactly `b` at time `e^v`, minus the product of the marginals.
fn x_pair_integrand(a: u32, u: f64, b: u32, v: f64, x: f64) -> f64 {
    let mu = (u - x).exp();
    let mv = (v - x).exp();
    let product = (ln_psi(a, mu) + ln_psi(b, mv)).exp();
    let joint = if a == b {
        let (lo, hi) = if u <= v { (u, v) } else { (v, u) };
        if a == 0 {
            // e^{-e^{hi-x}} (1 - e^{-e^{lo-x}}) written without cancellation
            return (-(hi - x).exp()).exp() * -(-(lo - x).exp()).exp_m1();
        }
        (-(hi - x).exp() + a as f64 * (lo - x) - ln_fact(a as u64)).exp()
    } else {
        // larger count must sit at the later time
        let (hi_l, t_hi, lo_l, t_lo) = if a > b { (a, u, b, v) } else { (b, v, a, u) };
        if t_hi <= t_lo {
            0.0
        } else {
            let gap = hi_l - lo_l;
            let ln_inc = (t_hi - x) + (-(t_lo - t_hi).exp_m1()).ln();
            (-(t_hi - x).exp() + (t_lo - x) * lo_l as f64 - ln_fact(lo_l as u64)
                + gap as f64 * ln_inc
                - ln_fact(gap as u64))
            .exp()
        }
    };
    joint - product
}

/// `E X_a(u) X_b(v)` by adaptive quadrature, `a, b >= 0`, `delta = u - v`.
pub fn x_pair_quadrature(a: u32, b: u32, delta: f64) -> Result<f64> {
    let (u, v) = (delta / 2.0, -delta / 2.0);
    let r = quad::integrate(
        |x| x_pair_integrand(a, u, b, v, x),
        -QUAD_WINDOW,
        QUAD_WINDOW,
        QUAD_TOL,
        32,
        20_000,
    )
    .map_err(|e| Error::Numeric(format!("X_{a}/X_{b} at delta={delta}: {e}")))?;
    Ok(r.value)
}

/// `E P_{l1}(u) P_{l2}(v)`, `delta = u - v`, from the integral representations.
/// `Z` quantities are assembled through `Z_l = -(X_0 + ... + X_{l-1})`.
pub fn quadrature_cov(kind: LimitKind, l1: u32, l2: u32, delta: f64) -> Result<f64> {
    if l1 == 0 || l2 == 0 {
        return Err(invalid("levels must be positive"));
    }
    if l1 > QUAD_MAX_LEVEL || l2 > QUAD_MAX_LEVEL {
        return Err(invalid(format!("quadrature supports levels up to {QUAD_MAX_LEVEL}")));
    }
    match kind {
        LimitKind::X => x_pair_quadrature(l1, l2, delta),
        LimitKind::Y => x_pair_quadrature(l1, l2, 0.0),
        LimitKind::Z => {
            let mut s = KahanSum::new();
            for i in 0..l1 {
                for k in 0..l2 {
                    s.add(x_pair_quadrature(i, k, delta)?);
                }
            }
            Ok(s.value())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn cov_z_values() {
        assert!((cov_z(1, 0.0) - LN_2).abs() < 1e-16);
        assert!((cov_z(2, 0.0) - (LN_2 - 0.25)).abs() < 1e-15);
        for l in 1..6 {
            assert!(cov_z(l, 60.0).abs() < 1e-20);
        }
    }

    #[test]
    fn cross_z_values() {
        assert!((cross_z(1, 1, 0.0) - (LN_2 - 0.5)).abs() < 1e-15);
        for l in 1..5 {
            assert_eq!(cross_z(l, 0, 0.7), cov_z(l, 0.7));
        }
        assert!((cross_z(1, 1, 1.0) - cross_z(1, 1, -1.0)).abs() > 1e-3);
    }

    #[test]
    fn cov_x_and_y_values() {
        assert!((cov_x(1, 0.0) - 0.75).abs() < 1e-15);
        assert!((cross_x(2, 1, 0.0) + 0.125).abs() < 1e-15);
        assert!((cov_y(1, 1) - 0.75).abs() < 1e-15);
        assert!((cov_y(1, 2) + 0.125).abs() < 1e-15);
        assert!((cov_y(2, 1) + 0.125).abs() < 1e-15);
    }

    #[test]
    fn x_zero_is_negated_z1() {
        // E X_0(u) X_k(v) = -E Z_1(u) X_k(v) = -(E Z_1 Z_k - E Z_1 Z_{k+1})
        for &d in &[-1.3, 0.0, 0.4, 2.0] {
            for k in 1..4 {
                let via_z = -(cross_z(1, k - 1, d) - cross_z(1, k, d));
                assert!((x_pair(0, k, d) - via_z).abs() < 1e-13, "k={k} d={d}");
            }
        }
    }

    #[test]
    fn quadrature_matches_small_cases() {
        assert!((quadrature_cov(LimitKind::X, 1, 1, 0.0).unwrap() - 0.75).abs() < 1e-9);
        assert!((quadrature_cov(LimitKind::Z, 1, 1, 0.0).unwrap() - LN_2).abs() < 1e-9);
        assert!((quadrature_cov(LimitKind::X, 2, 1, 0.0).unwrap() + 0.125).abs() < 1e-9);
        let q = quadrature_cov(LimitKind::X, 3, 1, 2.0).unwrap();
        assert!((q - cross_x(3, 1, -2.0)).abs() < 1e-9);
    }

    #[test]
    fn query_orientation() {
        let a = LimitCovQuery::new(LimitKind::Z, 1, 2, 1.0).unwrap().closed_form();
        let b = LimitCovQuery::new(LimitKind::Z, 2, 1, -1.0).unwrap().closed_form();
        assert!((a - b).abs() < 1e-15);
        let c = LimitCovQuery::new(LimitKind::X, 3, 1, -2.0).unwrap().closed_form();
        assert!((c - cross_x(3, 1, 2.0)).abs() < 1e-15);
        assert!(LimitCovQuery::new(LimitKind::X, 0, 1, 0.0).is_err());
    }
}
