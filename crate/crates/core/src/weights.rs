//! Weight families `(p_k)`, their counting function and tail bounds.
//!
//! Every family is built once and then shared read-only. Construction caches
//! a table of weights long enough that the mass beyond it is below `1e-17`,
//! which the sampler and the box enumerator both index into.

use std::fmt;
use std::str::FromStr;

use statrs::function::gamma::{gamma, gamma_ur};

use crate::error::{invalid, Error, Result};

/// Remainder tolerance used when summing the Weibull-like normalizer.
pub const NORMALIZER_TOL: f64 = 1e-15;

/// Mass allowed beyond the cached table.
const TABLE_TAIL: f64 = 1e-17;

const MAX_TABLE_LEN: usize = 20_000_000;

#[derive(Debug, Clone, PartialEq)]
pub enum FamilyKind {
    /// `p_k = C_alpha exp(-k^alpha)` with `alpha` in `(0, 1)`.
    Weibull { alpha: f64 },
    /// `p_k = (1 - p) p^(k-1)`.
    Geometric { p: f64 },
    /// Explicit normalized list. Only meant for brute-force oracles: it has
    /// finitely many positive weights.
    Finite { probs: Vec<f64> },
}

impl FromStr for FamilyKind {
    type Err = Error;

    /// Parses `weibull:ALPHA`, `geometric:P` or `finite:P1,P2,...`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = s
            .split_once(':')
            .ok_or_else(|| invalid(format!("family `{s}`: expected NAME:PARAMS")))?;
        let num = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| invalid(format!("family `{s}`: bad number `{x}`")))
        };
        match name.trim().to_ascii_lowercase().as_str() {
            "weibull" => Ok(FamilyKind::Weibull { alpha: num(arg)? }),
            "geometric" => Ok(FamilyKind::Geometric { p: num(arg)? }),
            "finite" => Ok(FamilyKind::Finite {
                probs: arg.split(',').map(num).collect::<Result<_>>()?,
            }),
            other => Err(invalid(format!("unknown family `{other}`"))),
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FamilyKind::Weibull { alpha } => write!(f, "weibull:{alpha}"),
            FamilyKind::Geometric { p } => write!(f, "geometric:{p}"),
            FamilyKind::Finite { probs } => {
                let parts: Vec<String> = probs.iter().map(|p| p.to_string()).collect();
                write!(f, "finite:{}", parts.join(","))
            }
        }
    }
}

/// The slowly varying factor attached to a family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlowlyVarying {
    /// `l(x) = c`.
    Constant(f64),
    /// `l(x) = x * per_unit`. Used for the geometric family, whose counting
    /// function grows like `log t / log(1/p)`.
    Linear { per_unit: f64 },
}

impl SlowlyVarying {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            SlowlyVarying::Constant(c) => c,
            SlowlyVarying::Linear { per_unit } => x * per_unit,
        }
    }
}

impl fmt::Display for SlowlyVarying {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlowlyVarying::Constant(c) => write!(f, "l(x) = {c}"),
            SlowlyVarying::Linear { per_unit } => write!(f, "l(x) = {per_unit} * x"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WeightFamily {
    kind: FamilyKind,
    normalizer: f64,
    beta: f64,
    ell: SlowlyVarying,
    /// `table[k-1] = p_k`.
    table: Vec<f64>,
    /// `tails[k] = tail_mass_bound(k)` for `k < table.len()`, `tails[0] = 1`.
    tails: Vec<f64>,
    /// Running sums of `table`.
    cumulative: Vec<f64>,
}

impl WeightFamily {
    pub fn from_kind(kind: &FamilyKind) -> Result<Self> {
        match kind {
            FamilyKind::Weibull { alpha } => Self::weibull(*alpha),
            FamilyKind::Geometric { p } => Self::geometric(*p),
            FamilyKind::Finite { probs } => Self::finite(probs.clone()),
        }
    }

    pub fn weibull(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("weibull alpha must lie in (0,1), got {alpha}")));
        }
        let remainder = |k: f64| gamma(1.0 / alpha) * gamma_ur(1.0 / alpha, k.powf(alpha)) / alpha;
        let mut sum = 0.0;
        let mut comp = 0.0;
        let mut k = 0usize;
        loop {
            k += 1;
            if k > MAX_TABLE_LEN {
                return Err(Error::Budget(format!(
                    "normalizer for alpha={alpha} needs more than {MAX_TABLE_LEN} terms"
                )));
            }
            let term = (-(k as f64).powf(alpha)).exp();
            let y = term - comp;
            let s = sum + y;
            comp = (s - sum) - y;
            sum = s;
            if remainder(k as f64) < NORMALIZER_TOL {
                break;
            }
        }
        let normalizer = 1.0 / (sum + remainder(k as f64));
        let kind = FamilyKind::Weibull { alpha };
        let mut fam = WeightFamily {
            kind,
            normalizer,
            beta: 1.0 / alpha - 1.0,
            ell: SlowlyVarying::Constant(1.0 / alpha),
            table: Vec::new(),
            tails: Vec::new(),
            cumulative: Vec::new(),
        };
        fam.fill_table()?;
        Ok(fam)
    }

    pub fn geometric(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(invalid(format!("geometric p must lie in (0,1), got {p}")));
        }
        let mut fam = WeightFamily {
            kind: FamilyKind::Geometric { p },
            normalizer: 1.0 - p,
            beta: 0.0,
            ell: SlowlyVarying::Linear { per_unit: 1.0 / (1.0 / p).ln() },
            table: Vec::new(),
            tails: Vec::new(),
            cumulative: Vec::new(),
        };
        fam.fill_table()?;
        Ok(fam)
    }

    /// Builds a test-only family from an explicit list summing to one within `1e-12`.
    pub fn finite(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("finite family needs at least one weight"));
        }
        if probs.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
            return Err(invalid("finite family weights must lie in (0,1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("finite family weights sum to {total}, not 1")));
        }
        let mut tails = vec![0.0; probs.len() + 1];
        for k in (0..probs.len()).rev() {
            tails[k] = tails[k + 1] + probs[k];
        }
        tails[0] = 1.0;
        let cumulative = running_sum(&probs);
        Ok(WeightFamily {
            kind: FamilyKind::Finite { probs: probs.clone() },
            normalizer: 1.0,
            beta: 0.0,
            ell: SlowlyVarying::Constant(1.0),
            table: probs,
            tails,
            cumulative,
        })
    }

    fn fill_table(&mut self) -> Result<()> {
        let mut table = Vec::new();
        let mut tails = vec![1.0];
        let mut k = 0usize;
        loop {
            k += 1;
            if k > MAX_TABLE_LEN {
                return Err(Error::Budget("weight table too long".into()));
            }
            table.push(self.formula(k));
            let tail = self.formula_tail(k);
            tails.push(tail);
            if tail < TABLE_TAIL {
                break;
            }
        }
        self.cumulative = running_sum(&table);
        self.table = table;
        self.tails = tails;
        Ok(())
    }

    fn formula(&self, k: usize) -> f64 {
        match &self.kind {
            FamilyKind::Weibull { alpha } => self.normalizer * (-(k as f64).powf(*alpha)).exp(),
            FamilyKind::Geometric { p } => (1.0 - p) * p.powi(k as i32 - 1),
            FamilyKind::Finite { probs } => probs.get(k - 1).copied().unwrap_or(0.0),
        }
    }

    fn formula_tail(&self, k: usize) -> f64 {
        match &self.kind {
            FamilyKind::Weibull { alpha } => {
                let a = *alpha;
                self.normalizer * gamma(1.0 / a) * gamma_ur(1.0 / a, (k as f64).powf(a)) / a
            }
            FamilyKind::Geometric { p } => p.powi(k as i32),
            FamilyKind::Finite { .. } => self.tails.get(k).copied().unwrap_or(0.0),
        }
    }

    pub fn kind(&self) -> &FamilyKind {
        &self.kind
    }

    /// `C_alpha` for Weibull-like families, `1 - p` for geometric, 1 for finite.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn ell(&self) -> SlowlyVarying {
        self.ell
    }

    pub fn ell_description(&self) -> String {
        self.ell.to_string()
    }

    pub fn is_finite(&self) -> bool {
        matches!(self.kind, FamilyKind::Finite { .. })
    }

    /// Cached weights `p_1, p_2, ...`; the mass beyond the last entry is below `1e-17`
    /// (exactly zero for finite families).
    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// `cumulative()[k-1] = p_1 + ... + p_k`, summed with compensation.
    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// `tails()[k]` bounds the mass strictly after index `k`, for `k` in `0..=table().len()`.
    pub fn tails(&self) -> &[f64] {
        &self.tails
    }

    pub fn weight(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(invalid("weight index must be at least 1"));
        }
        if let Some(&w) = self.table.get(k - 1) {
            return Ok(w);
        }
        Ok(self.formula(k))
    }

    /// `p_k` for `k >= 1`, from the cache when possible; zero past a finite list.
    #[inline]
    pub(crate) fn weight_at(&self, k: usize) -> f64 {
        match self.table.get(k - 1) {
            Some(&w) => w,
            None => self.formula(k),
        }
    }

    /// Tail bound after index `k >= 0`, from the cache when possible.
    #[inline]
    pub(crate) fn tail_at(&self, k: usize) -> f64 {
        match self.tails.get(k) {
            Some(&b) => b,
            None => self.formula_tail(k),
        }
    }

    /// Upper bound on `sum_{k > K} p_k`.
    pub fn tail_mass_bound(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(invalid("tail index must be at least 1"));
        }
        if let Some(&b) = self.tails.get(k) {
            return Ok(b);
        }
        Ok(self.formula_tail(k))
    }

    /// Counting function `#{k : p_k >= 1/t}`.
    pub fn rho(&self, t: f64) -> Result<u64> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(invalid(format!("rho needs t > 0, got {t}")));
        }
        Ok(self.rho_log(t.ln()))
    }

    /// Counting function evaluated at `exp(log_t)`; lets callers reach huge times.
    pub fn rho_log(&self, log_t: f64) -> u64 {
        match &self.kind {
            FamilyKind::Weibull { alpha } => {
                let x = self.normalizer.ln() + log_t;
                if x <= 0.0 {
                    // p_1 < 1/t; p_1 = 1/t exactly only when x == 0
                    return if x == 0.0 { 1 } else { 0 };
                }
                tolerant_floor(x.powf(1.0 / alpha))
            }
            FamilyKind::Geometric { p } => {
                let x = (1.0 - p).ln() + log_t;
                if x < -1e-12 {
                    return 0;
                }
                tolerant_floor(x.max(0.0) / (1.0 / p).ln()) + 1
            }
            FamilyKind::Finite { probs } => {
                let thresh = -log_t;
                probs
                    .iter()
                    .filter(|&&q| {
                        let lq = q.ln();
                        lq >= thresh || (lq - thresh).abs() <= 1e-12 * thresh.abs().max(1.0)
                    })
                    .count() as u64
            }
        }
    }

    /// Rows `(lambda, t, value, log lambda)` with
    /// `value = (rho(lambda t) - rho(t)) / ((log t)^beta l(log t))`.
    pub fn dehaan_profile(&self, lambdas: &[f64], ts: &[f64]) -> Result<Vec<DeHaanRow>> {
        if let Some(l) = lambdas.iter().find(|&&l| !(l > 0.0)) {
            return Err(invalid(format!("lambda must be positive, got {l}")));
        }
        if let Some(t) = ts.iter().find(|&&t| !(t > 1.0)) {
            return Err(invalid(format!("t must exceed 1, got {t}")));
        }
        let mut rows = Vec::with_capacity(lambdas.len() * ts.len());
        for &t in ts {
            let lt = t.ln();
            let denom = lt.powf(self.beta) * self.ell.eval(lt);
            let base = self.rho_log(lt) as f64;
            for &lambda in lambdas {
                let shifted = self.rho_log(lt + lambda.ln()) as f64;
                rows.push(DeHaanRow {
                    lambda,
                    t,
                    value: (shifted - base) / denom,
                    target: lambda.ln(),
                });
            }
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeHaanRow {
    pub lambda: f64,
    pub t: f64,
    pub value: f64,
    pub target: f64,
}

fn running_sum(xs: &[f64]) -> Vec<f64> {
    let mut acc = crate::kernels::KahanSum::new();
    xs.iter()
        .map(|&x| {
            acc.add(x);
            acc.value()
        })
        .collect()
}

/// Floor that treats values within rounding noise of an integer as that integer.
fn tolerant_floor(x: f64) -> u64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as u64
    } else {
        x.floor() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_weights_and_tail() {
        let g = WeightFamily::geometric(0.5).unwrap();
        assert_eq!(g.weight(3).unwrap(), 0.125);
        assert_eq!(g.tail_mass_bound(10).unwrap(), 2f64.powi(-10));
        assert_eq!(g.rho(8.0).unwrap(), 3);
        assert_eq!(g.rho(7.99).unwrap(), 2);
        assert_eq!(g.rho(0.5).unwrap(), 0);
        assert_eq!(g.rho(2.0).unwrap(), 1);
    }

    #[test]
    fn finite_lookup() {
        let f = WeightFamily::finite(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(f.weight(2).unwrap(), 0.3);
        assert_eq!(f.weight(4).unwrap(), 0.0);
        assert_eq!(f.tail_mass_bound(3).unwrap(), 0.0);
        assert!((f.tail_mass_bound(1).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(f.rho(0.5).unwrap(), 0);
        assert_eq!(f.rho(2.0).unwrap(), 1);
        assert_eq!(f.rho(5.0).unwrap(), 3);
        assert!(WeightFamily::finite(vec![0.5, 0.4]).is_err());
    }

    #[test]
    fn weibull_normalizer_matches_brute_sum() {
        let w = WeightFamily::weibull(0.5).unwrap();
        let brute: f64 = (1..200_000u64).map(|k| (-(k as f64).sqrt()).exp()).sum();
        assert!((w.normalizer() - 1.0 / brute).abs() < 1e-13);
        assert!((w.weight(1).unwrap() - w.normalizer() * (-1f64).exp()).abs() < 1e-16);
        let partial: f64 = w.table().iter().sum();
        assert!(partial <= 1.0 + 1e-15);
    }

    #[test]
    fn weibull_rho_closed_form() {
        let w = WeightFamily::weibull(0.5).unwrap();
        let log_t = 100.0 - w.normalizer().ln();
        assert_eq!(w.rho_log(log_t), 10_000);
        assert_eq!(w.rho(0.5).unwrap(), 0);
    }

    #[test]
    fn zero_index_rejected() {
        let g = WeightFamily::geometric(0.3).unwrap();
        assert!(g.weight(0).is_err());
        assert!(g.rho(0.0).is_err());
        assert!(WeightFamily::weibull(1.0).is_err());
        assert!(WeightFamily::geometric(0.0).is_err());
    }

    #[test]
    fn dehaan_rows() {
        let w = WeightFamily::weibull(0.5).unwrap();
        let rows = w.dehaan_profile(&[std::f64::consts::E, 1.0], &[400f64.exp()]).unwrap();
        assert!((rows[0].value - 1.0).abs() < 0.15);
        assert_eq!(rows[1].value, 0.0);
        let g = WeightFamily::geometric(0.5).unwrap();
        let r1 = g.dehaan_profile(&[4.0], &[1e3]).unwrap()[0].value;
        let r2 = g.dehaan_profile(&[4.0], &[1e12]).unwrap()[0].value;
        assert!(r2 < r1);
    }

    #[test]
    fn family_specs_round_trip() {
        for text in ["weibull:0.5", "geometric:0.25", "finite:0.5,0.3,0.2"] {
            let kind: FamilyKind = text.parse().unwrap();
            assert_eq!(kind.to_string(), text);
            assert!(WeightFamily::from_kind(&kind).is_ok());
        }
        assert!("pareto:1".parse::<FamilyKind>().is_err());
        assert!("weibull".parse::<FamilyKind>().is_err());
        assert!("finite:0.5,x".parse::<FamilyKind>().is_err());
    }
}
