//! Special functions and combinatorial identities shared by the other modules.

use statrs::function::factorial::ln_factorial;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::weights::SlowlyVarying;

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// `ln(l!)`.
#[inline]
pub fn ln_fact(l: u64) -> f64 {
    ln_factorial(l)
}

/// `psi_l(x) = x^l e^{-x} / l!`, evaluated in log space.
pub fn psi(l: u32, x: f64) -> f64 {
    if x <= 0.0 {
        return if l == 0 { 1.0 } else { 0.0 };
    }
    if l == 0 {
        return (-x).exp();
    }
    (l as f64 * x.ln() - x - ln_fact(l as u64)).exp()
}

/// `ln psi_l(x)`; `-inf` when `psi` vanishes.
pub fn ln_psi(l: u32, x: f64) -> f64 {
    if x <= 0.0 {
        return if l == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    l as f64 * x.ln() - x - ln_fact(l as u64)
}

/// `(P{Poisson(m) <= l-1}, P{Poisson(m) >= l})`, each accurate in relative terms.
pub fn poisson_split(l: u32, m: f64) -> (f64, f64) {
    if l == 0 {
        return (0.0, 1.0);
    }
    if m <= 0.0 {
        return (1.0, 0.0);
    }
    if l == 1 {
        return ((-m).exp(), -(-m).exp_m1());
    }
    if m < l as f64 {
        // the tail is the small side: sum upward from psi_l
        let mut term = psi(l, m);
        let mut acc = KahanSum::new();
        let mut i = l;
        while term > 0.0 {
            acc.add(term);
            i += 1;
            term *= m / i as f64;
            if term < 1e-18 * acc.value() {
                break;
            }
        }
        let tail = acc.value().min(1.0);
        (1.0 - tail, tail)
    } else {
        let below: KahanSum = (0..l).map(|i| psi(i, m)).collect();
        let below = below.value().min(1.0);
        (below, 1.0 - below)
    }
}

/// `P{Poisson(m) >= l}`.
pub fn poisson_tail(l: u32, m: f64) -> f64 {
    poisson_split(l, m).1
}

/// `P{Poisson(m) <= l-1}`.
pub fn poisson_cdf_below(l: u32, m: f64) -> f64 {
    poisson_split(l, m).0
}

/// `ln C(n, k)` summed factor by factor to keep precision when `n` is large.
fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    if n <= 170 {
        return ln_fact(n) - ln_fact(k) - ln_fact(n - k);
    }
    let mut s = KahanSum::new();
    for i in 0..k {
        s.add(((n - i) as f64 / (i + 1) as f64).ln());
    }
    s.value()
}

/// Binomial pmf `P{Bin(n,p) = k}` in log space.
pub fn binomial_pmf(n: u64, p: f64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    (ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p()).exp()
}

/// `P{Binomial(n, p) >= l}`.
pub fn binomial_tail(n: u64, p: f64, l: u64) -> f64 {
    binomial_split(n, p, l).1
}

/// `(P{Bin(n,p) <= l-1}, P{Bin(n,p) >= l})`.
pub fn binomial_split(n: u64, p: f64, l: u64) -> (f64, f64) {
    if l == 0 {
        return (0.0, 1.0);
    }
    if l > n || p <= 0.0 {
        return (1.0, 0.0);
    }
    if p >= 1.0 {
        return (0.0, 1.0);
    }
    let odds = p / (1.0 - p);
    if (l as f64) > n as f64 * p {
        let mut term = binomial_pmf(n, p, l);
        let mut acc = KahanSum::new();
        let mut i = l;
        loop {
            acc.add(term);
            if i == n {
                break;
            }
            term *= (n - i) as f64 / (i + 1) as f64 * odds;
            i += 1;
            if term < 1e-18 * acc.value() || term == 0.0 {
                break;
            }
        }
        let tail = acc.value().min(1.0);
        (1.0 - tail, tail)
    } else {
        let mut term = binomial_pmf(n, p, 0);
        let mut acc = KahanSum::new();
        for i in 0..l {
            acc.add(term);
            term *= (n - i) as f64 / (i + 1) as f64 * odds;
        }
        let below = acc.value().min(1.0);
        (below, 1.0 - below)
    }
}

/// Normalization parameters for generation `j`.
#[derive(Debug, Clone, Copy)]
pub struct AsymptoticParams {
    pub beta: f64,
    pub j: u32,
    pub ell: SlowlyVarying,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizers {
    pub c: f64,
    /// `f_j(T) = T^{j beta + j - 1} l(T)^j`.
    pub f: f64,
    /// `g_j(t) = f_j(log t)`.
    pub g: f64,
}

impl AsymptoticParams {
    /// `c_j = Gamma(beta+1)^j / Gamma(j(beta+1))`.
    pub fn c(&self) -> f64 {
        let j = self.j as f64;
        (j * ln_gamma(self.beta + 1.0) - ln_gamma(j * (self.beta + 1.0))).exp()
    }

    pub fn f(&self, big_t: f64) -> f64 {
        let j = self.j as f64;
        big_t.powf(j * self.beta + j - 1.0) * self.ell.eval(big_t).powi(self.j as i32)
    }

    pub fn g(&self, t: f64) -> f64 {
        self.f(t.ln())
    }
}

/// Returns `(c_j, f_j(T), g_j(t))`.
pub fn c_f_g(params: &AsymptoticParams, big_t: f64, t: f64) -> Normalizers {
    Normalizers {
        c: params.c(),
        f: params.f(big_t),
        g: params.g(t),
    }
}

/// `(b_l, b*_l)`: limit variances of the at-least-`l` and exactly-`l` processes.
pub fn b_constants(l: u32) -> (f64, f64) {
    assert!(l >= 1, "level must be positive");
    // t_k = (2k-1)!/((k!)^2 2^{2k}) = C(2k,k) 2^{-2k} / (2k)
    let mut central = 0.5; // C(2k,k) 2^{-2k} at k = 1
    let mut sum = KahanSum::new();
    for k in 1..l {
        sum.add(central / (2 * k) as f64);
        central *= (2 * k + 1) as f64 / (2 * (k + 1)) as f64;
    }
    let b = std::f64::consts::LN_2 - sum.value();
    // central now holds C(2l,l) 2^{-2l}
    let b_star = (1.0 - central / 2.0) / l as f64;
    (b, b_star)
}

/// Exact `C(n, k)`; `None` on `u128` overflow.
pub fn binom_u128(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i + 1) as u128;
    }
    Some(acc)
}

/// Both sides of `sum_k C(a+k,k) C(r+n-k,n-k) = C(a+r+n+1,n)` as exact integers.
pub fn convolution_identity(a: u64, r: u64, n: u64) -> Result<(u128, u128)> {
    let overflow = || Error::Range(format!("convolution identity overflows at a={a} r={r} n={n}"));
    let mut lhs: u128 = 0;
    for k in 0..=n {
        let x = binom_u128(a + k, k).ok_or_else(overflow)?;
        let y = binom_u128(r + n - k, n - k).ok_or_else(overflow)?;
        lhs = lhs
            .checked_add(x.checked_mul(y).ok_or_else(overflow)?)
            .ok_or_else(overflow)?;
    }
    let rhs = binom_u128(a + r + n + 1, n).ok_or_else(overflow)?;
    Ok((lhs, rhs))
}

/// `sum_{k<l} C(k+l,l) (a^k b^l + a^l b^k) / ((a+b)^{k+l} (k+l))`, which equals `1/l`.
pub fn binomial_identity_lhs(l: u32, a: f64, b: f64) -> f64 {
    let x = a / (a + b);
    let y = b / (a + b);
    let lf = l as f64;
    let (lx, ly) = (x.ln(), y.ln());
    let mut s = KahanSum::new();
    for k in 0..l {
        let kf = k as f64;
        let lc = ln_fact((k + l) as u64) - ln_fact(l as u64) - ln_fact(k as u64);
        let t1 = (lc + kf * lx + lf * ly).exp();
        let t2 = (lc + lf * lx + kf * ly).exp();
        s.add((t1 + t2) / (kf + lf));
    }
    s.value()
}

/// CDF and density of `G_l = log(Erlang(l, 1))`: `P{Poisson(e^x) >= l}` and
/// `exp(-e^x + x l) / (l-1)!`.
pub fn erlang_and_gl(l: u32, x: f64) -> (f64, f64) {
    assert!(l >= 1, "level must be positive");
    let ex = x.exp();
    let cdf = poisson_tail(l, ex);
    let density = (-ex + x * l as f64 - ln_fact(l as u64 - 1)).exp();
    (cdf, density)
}

/// Constant `d_l` with `g_l(x) <= d_l exp(-|x - log l|)`.
pub fn density_envelope(l: u32) -> f64 {
    assert!(l >= 1, "level must be positive");
    if l == 1 {
        return 1.0;
    }
    let lf = l as f64;
    let right = ((lf + 1.0) * (lf + 1.0).ln() - (lf + 1.0) - ln_fact(l as u64)).exp();
    let left = ((lf - 1.0) * (lf - 1.0).ln() - (lf - 1.0) - ln_fact(l as u64 - 1)).exp() * lf;
    right.max(left)
}

/// Uniform bound on `|E K_t(l) - E K_{floor t}(l)|` for the Poissonized and
/// deterministic schemes: `1 + sum_{i<l} max(A_i, B_i)`.
pub fn depoissonization_constant(l: u32) -> f64 {
    let mut total = 1.0;
    for i in 0..l as u64 {
        let a = if i == 0 {
            0.0
        } else {
            ((i as f64) * (i as f64).ln() - ln_fact(i - 1)).exp()
        };
        let b = match i {
            0 => (-1f64).exp(),
            1 => 4.0 * (-2f64).exp(),
            _ => {
                let fi = i as f64;
                ((fi + 1.0) * (fi + 1.0).ln() - (fi + 1.0) - ln_fact(i)).exp()
                    + ((fi - 1.0) * (fi - 1.0).ln() - (fi - 1.0) - ln_fact(i - 2)).exp() / 2.0
            }
        };
        total += a.max(b);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, LN_2};

    #[test]
    fn psi_values() {
        assert_eq!(psi(0, 0.0), 1.0);
        assert!((psi(1, 1.0) - 1.0 / E).abs() < 1e-16);
        let v = psi(5, 700.0);
        assert!(v > 0.0 && v.is_finite());
        let expect = 5.0 * 700f64.ln() - 700.0 - 120f64.ln();
        assert!((v.ln() - expect).abs() < 1e-12);
    }

    #[test]
    fn poisson_tail_values() {
        assert_eq!(poisson_tail(0, 3.0), 1.0);
        assert!((poisson_tail(1, LN_2) - 0.5).abs() < 1e-16);
        let expect = 1.0 - (-2f64).exp() * 5.0;
        assert!((poisson_tail(3, 2.0) - expect).abs() < 1e-15);
        // small mean keeps relative accuracy
        let m = 1e-9;
        assert!((poisson_tail(3, m) / (m * m * m / 6.0) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn binomial_tail_values() {
        assert_eq!(binomial_tail(5, 0.3, 0), 1.0);
        assert!((binomial_tail(2, 0.5, 2) - 0.25).abs() < 1e-16);
        assert_eq!(binomial_tail(2, 0.5, 3), 0.0);
        // exact rational evaluation of 1 - sum_{k<3} C(100,k) 0.01^k 0.99^(100-k)
        let exact = 0.079_373_202_252_180_34;
        assert!((binomial_tail(100, 0.01, 3) / exact - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalizer_constants() {
        let p1 = AsymptoticParams { beta: 0.7, j: 1, ell: SlowlyVarying::Constant(2.0) };
        assert!((p1.c() - 1.0).abs() < 1e-15);
        let p2 = AsymptoticParams { beta: 1.0, j: 2, ell: SlowlyVarying::Constant(2.0) };
        assert!((p2.c() - 1.0 / 6.0).abs() < 1e-14);
        let p3 = AsymptoticParams { beta: 1.0, j: 1, ell: SlowlyVarying::Constant(2.0) };
        let n = c_f_g(&p3, 10.0, 10f64.exp());
        assert!((n.f - 20.0).abs() < 1e-12);
        assert!((n.g - 20.0).abs() < 1e-12);
    }

    #[test]
    fn b_values() {
        let (b1, s1) = b_constants(1);
        assert_eq!(b1, LN_2);
        assert!((s1 - 0.75).abs() < 1e-16);
        let (b2, s2) = b_constants(2);
        assert!((b2 - (LN_2 - 0.25)).abs() < 1e-16);
        assert!((s2 - 13.0 / 32.0).abs() < 1e-16);
        let mut prev = f64::INFINITY;
        for l in 1..=50 {
            let (b, s) = b_constants(l);
            assert!(b > 0.0 && s > 0.0);
            assert!(b < prev);
            prev = b;
        }
    }

    #[test]
    fn convolution_examples() {
        assert_eq!(convolution_identity(1, 1, 1).unwrap(), (4, 4));
        assert_eq!(convolution_identity(5, 7, 0).unwrap(), (1, 1));
        assert_eq!(convolution_identity(3, 2, 4).unwrap(), (210, 210));
        assert!(convolution_identity(200, 200, 200).is_err());
    }

    #[test]
    fn binomial_identity_examples() {
        assert!((binomial_identity_lhs(1, 0.4, 2.0) - 1.0).abs() < 1e-15);
        assert!((binomial_identity_lhs(2, 1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((binomial_identity_lhs(5, 0.3, 7.1) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn erlang_values() {
        let (cdf, dens) = erlang_and_gl(1, 0.0);
        assert!((cdf - (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert!((dens - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn depoissonization_constants() {
        assert!((depoissonization_constant(1) - (1.0 + (-1f64).exp())).abs() < 1e-15);
        assert!((depoissonization_constant(2) - (2.0 + (-1f64).exp())).abs() < 1e-15);
    }
}
