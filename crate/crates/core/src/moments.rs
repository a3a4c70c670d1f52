//! Exact finite-time moments of the occupancy counts.
//!
//! Every quantity is a sum over generation-`j` boxes `r` of a function of the
//! box weight `p_r`. The sums are evaluated by depth-first enumeration of box
//! prefixes in order of decreasing weight. Each summand obeys a bound
//! `|term(p_r)| <= kappa * p_r` (Markov: `P{Poisson(m) >= l} <= m / l`), and the
//! weights of all boxes below a prefix add up to the prefix weight, so a
//! subtree can be dropped once `kappa * weight <= eps` at a cost of at most
//! `kappa * weight`. The dropped mass is accumulated into a certified bound.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::kernels::{
    binomial_pmf, binomial_tail, poisson_cdf_below, poisson_tail, psi, KahanSum,
};
use crate::weights::WeightFamily;

/// Truncated sum with a certified absolute error bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub value: f64,
    pub error_bound: f64,
    pub boxes_enumerated: u64,
    pub prune_threshold: f64,
}

impl MomentEstimate {
    /// `a * self + b * other`, with bounds combined accordingly.
    pub fn combine(&self, a: f64, other: &MomentEstimate, b: f64) -> MomentEstimate {
        MomentEstimate {
            value: a * self.value + b * other.value,
            error_bound: a.abs() * self.error_bound + b.abs() * other.error_bound,
            boxes_enumerated: self.boxes_enumerated + other.boxes_enumerated,
            prune_threshold: self.prune_threshold.max(other.prune_threshold),
        }
    }
}

/// Enumeration controls.
#[derive(Debug, Clone, Copy)]
pub struct EnumOptions {
    /// Per-subtree contribution bound below which a subtree is dropped.
    pub eps: f64,
    /// Maximum number of leaf boxes before the call fails.
    pub box_budget: u64,
    /// Split the first coordinate across worker threads.
    pub parallel: bool,
}

impl Default for EnumOptions {
    fn default() -> Self {
        EnumOptions {
            eps: 1e-12,
            box_budget: 500_000_000,
            parallel: true,
        }
    }
}

impl EnumOptions {
    pub fn with_eps(eps: f64) -> Self {
        EnumOptions { eps, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(invalid(format!("prune budget must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Partial {
    sum: KahanSum,
    boxes: u64,
    /// Boxes already reported to the shared budget counter.
    flushed: u64,
    pruned_mass: KahanSum,
}

impl Partial {
    fn merge(&mut self, other: &Partial) {
        self.sum.add(other.sum.value());
        self.boxes += other.boxes;
        self.flushed += other.flushed;
        self.pruned_mass.add(other.pruned_mass.value());
    }
}

struct Walker<'a, F> {
    family: &'a WeightFamily,
    kappa: f64,
    eps: f64,
    exhaustive: bool,
    budget: u64,
    counter: &'a AtomicU64,
    term: F,
}

impl<F: Fn(f64) -> Result<f64>> Walker<'_, F> {
    fn flush(&self, acc: &mut Partial) -> Result<()> {
        let fresh = acc.boxes - acc.flushed;
        acc.flushed = acc.boxes;
        let seen = self.counter.fetch_add(fresh, Ordering::Relaxed) + fresh;
        if seen > self.budget {
            return Err(Error::Budget(format!(
                "more than {} boxes enumerated; raise the budget or the prune threshold",
                self.budget
            )));
        }
        Ok(())
    }

    /// Visits all boxes `depth` levels below a prefix of absolute weight `w_abs`;
    /// the term receives the weight relative to that prefix.
    fn walk(&self, depth: usize, w_abs: f64, rel: f64, start_k: usize, acc: &mut Partial) -> Result<()> {
        let mut k = start_k;
        loop {
            let pk = self.family.weight_at(k);
            let child_abs = w_abs * pk;
            if pk == 0.0 || (!self.exhaustive && child_abs * self.kappa <= self.eps) {
                // weights are nonincreasing, so all later siblings are dropped too
                acc.pruned_mass.add(w_abs * self.family.tail_at(k - 1));
                return Ok(());
            }
            let child_rel = rel * pk;
            if depth == 1 {
                acc.sum.add((self.term)(child_rel)?);
                acc.boxes += 1;
                if acc.boxes - acc.flushed >= 4096 {
                    self.flush(acc)?;
                }
            } else {
                self.walk(depth - 1, child_abs, child_rel, 1, acc)?;
            }
            k += 1;
        }
    }
}

/// Sums `term(p_r / w0)` over generation-`depth` boxes below a prefix of
/// weight `w0`; returns the partial sum and the dropped mass (absolute units).
fn sum_boxes<F>(
    family: &WeightFamily,
    depth: usize,
    w0: f64,
    kappa: f64,
    opts: &EnumOptions,
    parallel: bool,
    counter: &AtomicU64,
    term: F,
) -> Result<Partial>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    let walker = Walker {
        family,
        kappa,
        eps: opts.eps,
        exhaustive: family.is_finite(),
        budget: opts.box_budget,
        counter,
        term,
    };
    if !parallel {
        let mut acc = Partial::default();
        walker.walk(depth, w0, 1.0, 1, &mut acc)?;
        walker.flush(&mut acc)?;
        return Ok(acc);
    }
    // find the first-coordinate cutoff, then spread the surviving indices
    let mut first_pruned = 1usize;
    loop {
        let pk = family.weight_at(first_pruned);
        if pk == 0.0 || (!walker.exhaustive && w0 * pk * kappa <= opts.eps) {
            break;
        }
        first_pruned += 1;
    }
    let parts: Vec<Result<Partial>> = (1..first_pruned)
        .into_par_iter()
        .map(|k| {
            let mut acc = Partial::default();
            let pk = family.weight_at(k);
            if depth == 1 {
                acc.sum.add((walker.term)(pk)?);
                acc.boxes = 1;
            } else {
                walker.walk(depth - 1, w0 * pk, pk, 1, &mut acc)?;
            }
            walker.flush(&mut acc)?;
            Ok(acc)
        })
        .collect();
    let mut total = Partial::default();
    for p in parts {
        total.merge(&p?);
    }
    total.pruned_mass.add(w0 * family.tail_at(first_pruned - 1));
    Ok(total)
}

fn finish(p: Partial, kappa: f64, opts: &EnumOptions) -> MomentEstimate {
    MomentEstimate {
        value: p.sum.value(),
        error_bound: kappa * p.pruned_mass.value(),
        boxes_enumerated: p.boxes,
        prune_threshold: opts.eps,
    }
}

fn run<F>(family: &WeightFamily, j: usize, kappa: f64, opts: &EnumOptions, term: F) -> Result<MomentEstimate>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    opts.validate()?;
    if j == 0 {
        return Err(invalid("generation must be at least 1"));
    }
    let counter = AtomicU64::new(0);
    let p = sum_boxes(family, j, 1.0, kappa, opts, opts.parallel, &counter, |w| term(w))?;
    Ok(finish(p, kappa, opts))
}

fn check_level(l: u32) -> Result<()> {
    if l == 0 {
        return Err(invalid("level must be at least 1"));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(invalid(format!("time must be positive and finite, got {t}")));
    }
    Ok(())
}

/// Result of a plain enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnumerationSummary {
    pub boxes: u64,
    /// Total weight of boxes that were not visited.
    pub pruned_mass: f64,
}

impl EnumerationSummary {
    /// Bound on the dropped part of any level-`l` occupancy sum at time `t`.
    pub fn error_bound(&self, t: f64, l: u32) -> f64 {
        t * self.pruned_mass / l as f64
    }
}

/// Visits generation-`j` box weights `p_r` with `t p_r > eps` (sequentially,
/// largest first within each coordinate); dropped weight is reported.
pub fn enumerate_boxes<V: FnMut(f64) + Send>(
    family: &WeightFamily,
    j: usize,
    eps: f64,
    t: f64,
    mut visit: V,
) -> Result<EnumerationSummary> {
    check_time(t)?;
    if j == 0 {
        return Err(invalid("generation must be at least 1"));
    }
    let opts = EnumOptions { eps, box_budget: u64::MAX, parallel: false };
    opts.validate()?;
    // the walker wants a shared closure; route the visitor through a cell
    let cell = std::sync::Mutex::new(&mut visit);
    let counter = AtomicU64::new(0);
    let p = sum_boxes(family, j, 1.0, t, &opts, false, &counter, |w| {
        (cell.lock().expect("visitor lock"))(w);
        Ok(0.0)
    })?;
    Ok(EnumerationSummary {
        boxes: p.boxes,
        pruned_mass: p.pruned_mass.value(),
    })
}

/// `E K_t^{(j)}(l) = sum_r P{Poisson(p_r t) >= l}`.
pub fn mean_k(family: &WeightFamily, j: usize, l: u32, t: f64, opts: &EnumOptions) -> Result<MomentEstimate> {
    check_level(l)?;
    check_time(t)?;
    run(family, j, t / l as f64, opts, |p| Ok(poisson_tail(l, p * t)))
}

/// `E K*_t^{(j)}(l) = sum_r psi_l(p_r t)`.
pub fn mean_k_star(family: &WeightFamily, j: usize, l: u32, t: f64, opts: &EnumOptions) -> Result<MomentEstimate> {
    check_level(l)?;
    check_time(t)?;
    run(family, j, t / l as f64, opts, |p| Ok(psi(l, p * t)))
}

/// Deterministic scheme after `n` balls: `sum_r P{Bin(n, p_r) >= l}`.
pub fn mean_k_binomial(family: &WeightFamily, j: usize, l: u32, n: u64, opts: &EnumOptions) -> Result<MomentEstimate> {
    check_level(l)?;
    run(family, j, n as f64 / l as f64, opts, |p| Ok(binomial_tail(n, p, l as u64)))
}

/// `Cov(K_s(l), K_t(l)) = sum_r P{pi(s^t) >= l} P{pi(s v t) <= l-1}`.
pub fn cov_k_same(family: &WeightFamily, j: usize, l: u32, s: f64, t: f64, opts: &EnumOptions) -> Result<MomentEstimate> {
    check_level(l)?;
    check_time(s)?;
    check_time(t)?;
    let (lo, hi) = (s.min(t), s.max(t));
    run(family, j, lo / l as f64, opts, |p| {
        Ok(poisson_tail(l, p * lo) * poisson_cdf_below(l, p * hi))
    })
}

/// Per-box covariance of `1{pi(ta) >= la}` and `1{pi(tb) >= lb}` for `ta <= tb`.
fn cross_level_term(p: f64, la: u32, ta: f64, lb: u32, tb: f64) -> f64 {
    let a = poisson_tail(la, p * ta);
    let c = poisson_cdf_below(lb, p * tb);
    if la >= lb {
        return a * c;
    }
    // subtract P{la <= pi(ta) <= lb - 1, pi(tb) <= lb - 1}
    let mut s = KahanSum::new();
    s.add(a * c);
    let gap = p * (tb - ta);
    for i in la..lb {
        s.add(-psi(i, p * ta) * poisson_cdf_below(lb - i, gap));
    }
    s.value()
}

/// `Cov(K_s(l1), K_t(l2))`.
pub fn cov_k_cross_level(
    family: &WeightFamily,
    j: usize,
    l1: u32,
    s: f64,
    l2: u32,
    t: f64,
    opts: &EnumOptions,
) -> Result<MomentEstimate> {
    check_level(l1)?;
    check_level(l2)?;
    check_time(s)?;
    check_time(t)?;
    let kappa = (s / l1 as f64).min(t / l2 as f64);
    run(family, j, kappa, opts, |p| {
        Ok(if s <= t {
            cross_level_term(p, l1, s, l2, t)
        } else {
            cross_level_term(p, l2, t, l1, s)
        })
    })
}

/// `Cov(K*_s(l), K*_t(l)) = sum_r [psi_l(p(s^t)) e^{-p|t-s|} - psi_l(ps) psi_l(pt)]`.
pub fn cov_k_star_same(family: &WeightFamily, j: usize, l: u32, s: f64, t: f64, opts: &EnumOptions) -> Result<MomentEstimate> {
    check_level(l)?;
    check_time(s)?;
    check_time(t)?;
    let lo = s.min(t);
    let gap = (t - s).abs();
    run(family, j, lo / l as f64, opts, |p| {
        Ok(psi(l, p * lo) * (-p * gap).exp() - psi(l, p * s) * psi(l, p * t))
    })
}

/// `Cov(K*_s(l1), K*_t(l2))` assembled from at-least covariances.
pub fn cov_k_star_cross_level(
    family: &WeightFamily,
    j: usize,
    l1: u32,
    s: f64,
    l2: u32,
    t: f64,
    opts: &EnumOptions,
) -> Result<MomentEstimate> {
    if l1 == l2 {
        return cov_k_star_same(family, j, l1, s, t, opts);
    }
    let c = |a: u32, b: u32| cov_k_cross_level(family, j, a, s, b, t, opts);
    let e = c(l1, l2)?
        .combine(1.0, &c(l1, l2 + 1)?, -1.0)
        .combine(1.0, &c(l1 + 1, l2)?, -1.0)
        .combine(1.0, &c(l1 + 1, l2 + 1)?, 1.0);
    Ok(e)
}

/// Per-pair covariance of `1{pi_1(s) >= l}` for a generation-`i` box with
/// weight `p1` and `1{pi_12(t) >= n}` for a descendant of relative weight `p2`.
fn cross_gen_term(p1: f64, p2: f64, l: u32, n: u32, s: f64, t: f64) -> f64 {
    let pb = poisson_tail(n, p1 * p2 * t);
    if t >= s {
        let fresh = p1 * p2 * (t - s);
        let mut acc = KahanSum::new();
        for m in 0..l {
            let mut given = KahanSum::new();
            for k in 0..=m {
                let need = n.saturating_sub(k);
                given.add(binomial_pmf(m as u64, p2, k as u64) * poisson_tail(need, fresh));
            }
            acc.add(-psi(m, p1 * s) * (given.value() - pb));
        }
        acc.value()
    } else {
        let late = p1 * (s - t);
        let mut joint = KahanSum::new();
        for k in n..l {
            joint.add(
                psi(k, p1 * t)
                    * binomial_tail(k as u64, p2, n as u64)
                    * poisson_cdf_below(l - k, late),
            );
        }
        -(joint.value() - poisson_cdf_below(l, p1 * s) * pb)
    }
}

/// `Cov(K_s^{(i)}(l), K_t^{(j)}(n))` for generations `i < j`.
///
/// The generation-`j` boxes are enumerated as a generation-`i` prefix followed
/// by a nested enumeration of the remaining `j - i` coordinates.
#[allow(clippy::too_many_arguments)]
pub fn cov_k_cross_gen(
    family: &WeightFamily,
    i: usize,
    j: usize,
    l: u32,
    n: u32,
    s: f64,
    t: f64,
    opts: &EnumOptions,
) -> Result<MomentEstimate> {
    check_level(l)?;
    check_level(n)?;
    check_time(s)?;
    check_time(t)?;
    opts.validate()?;
    if i == 0 || i >= j {
        return Err(invalid(format!("need 1 <= i < j, got i={i} j={j}")));
    }
    let kappa = t / n as f64;
    let counter = AtomicU64::new(0);
    let inner_pruned = std::sync::Mutex::new(KahanSum::new());
    let outer = sum_boxes(family, i, 1.0, kappa, opts, opts.parallel, &counter, |p1| {
        let inner = sum_boxes(family, j - i, p1, kappa, opts, false, &counter, |p2| {
            Ok(cross_gen_term(p1, p2, l, n, s, t))
        })?;
        inner_pruned
            .lock()
            .expect("pruned-mass lock")
            .add(inner.pruned_mass.value());
        Ok(inner.sum.value())
    })?;
    // outer leaves count generation-i boxes; report generation-j work instead
    let boxes = counter.load(Ordering::Relaxed);
    let pruned = outer.pruned_mass.value() + inner_pruned.into_inner().expect("pruned-mass lock").value();
    Ok(MomentEstimate {
        value: outer.sum.value(),
        error_bound: kappa * pruned,
        boxes_enumerated: boxes.max(outer.boxes),
        prune_threshold: opts.eps,
    })
}

/// `|E K_t(l) - E K_{floor t}(l)|` with its enumeration error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapEstimate {
    pub t: f64,
    pub poissonized: MomentEstimate,
    pub deterministic: MomentEstimate,
    pub gap: f64,
    /// `gap + error bounds` dominates the true gap.
    pub gap_upper: f64,
}

pub fn depoissonization_gap(family: &WeightFamily, j: usize, l: u32, t: f64, opts: &EnumOptions) -> Result<GapEstimate> {
    let pois = mean_k(family, j, l, t, opts)?;
    let det = mean_k_binomial(family, j, l, t.floor() as u64, opts)?;
    let gap = (pois.value - det.value).abs();
    Ok(GapEstimate {
        t,
        poissonized: pois,
        deterministic: det,
        gap,
        gap_upper: gap + pois.error_bound + det.error_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_box() -> WeightFamily {
        WeightFamily::finite(vec![1.0]).unwrap()
    }

    fn opts() -> EnumOptions {
        EnumOptions::default()
    }

    #[test]
    fn finite_family_is_exhaustive() {
        let f = WeightFamily::finite(vec![0.5, 0.3, 0.2]).unwrap();
        let e = mean_k(&f, 2, 1, 3.0, &opts()).unwrap();
        assert_eq!(e.error_bound, 0.0);
        assert_eq!(e.boxes_enumerated, 9);
    }

    #[test]
    fn geometric_enumeration_depth() {
        let g = WeightFamily::geometric(0.5).unwrap();
        let mut visited = 0;
        let summary = enumerate_boxes(&g, 1, 1e-8, 10.0, |_| visited += 1).unwrap();
        // 10 * 2^{-k} > 1e-8 holds for k <= 29
        assert_eq!(visited, 29);
        assert!(summary.error_bound(10.0, 1) <= 2e-8);
    }

    #[test]
    fn degenerate_budget() {
        let w = WeightFamily::weibull(0.5).unwrap();
        let e = mean_k(&w, 1, 2, 10.0, &EnumOptions::with_eps(100.0)).unwrap();
        assert_eq!(e.boxes_enumerated, 0);
        assert!((e.error_bound - 5.0).abs() < 1e-12);
    }

    #[test]
    fn single_box_reductions() {
        let f = single_box();
        for l in 1..4 {
            let m = mean_k(&f, 1, l, 2.5, &opts()).unwrap();
            assert!((m.value - poisson_tail(l, 2.5)).abs() < 1e-15);
        }
        let (s, t) = (0.7, 1.9);
        let c = cov_k_same(&f, 1, 1, s, t, &opts()).unwrap().value;
        assert!((c - (-t).exp() * (1.0 - (-s).exp())).abs() < 1e-15);
        let c = cov_k_cross_level(&f, 1, 2, s, 1, t, &opts()).unwrap().value;
        let expect = poisson_tail(2, s) - poisson_tail(2, s) * poisson_tail(1, t);
        assert!((c - expect).abs() < 1e-15);
        let c = cov_k_star_same(&f, 1, 1, s, t, &opts()).unwrap().value;
        let expect = s * (-t).exp() - psi(1, s) * psi(1, t);
        assert!((c - expect).abs() < 1e-15);
        let b = mean_k_binomial(&WeightFamily::finite(vec![0.5, 0.5]).unwrap(), 1, 2, 2, &opts()).unwrap();
        assert!((b.value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_level_equal_levels_match_same() {
        let w = WeightFamily::weibull(0.5).unwrap();
        for &(s, t) in &[(100.0, 300.0), (300.0, 100.0), (50.0, 50.0)] {
            let a = cov_k_same(&w, 1, 2, s, t, &opts()).unwrap().value;
            let b = cov_k_cross_level(&w, 1, 2, s, 2, t, &opts()).unwrap().value;
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn cross_gen_single_box_chain() {
        // one box per generation: both indicators coincide at s = t
        let f = single_box();
        let t = 1.3;
        let c = cov_k_cross_gen(&f, 1, 2, 1, 1, t, t, &opts()).unwrap();
        assert!((c.value - (-t).exp() * (1.0 - (-t).exp())).abs() < 1e-15);
    }

    #[test]
    fn binomial_n_one() {
        let w = WeightFamily::weibull(0.5).unwrap();
        let e = mean_k_binomial(&w, 2, 1, 1, &opts()).unwrap();
        assert!((e.value - 1.0).abs() <= e.error_bound + 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        let w = WeightFamily::weibull(0.5).unwrap();
        assert!(mean_k(&w, 0, 1, 1.0, &opts()).is_err());
        assert!(mean_k(&w, 1, 0, 1.0, &opts()).is_err());
        assert!(mean_k(&w, 1, 1, -1.0, &opts()).is_err());
        assert!(mean_k(&w, 1, 1, 1.0, &EnumOptions::with_eps(0.0)).is_err());
        assert!(cov_k_cross_gen(&w, 2, 2, 1, 1, 1.0, 1.0, &opts()).is_err());
        let tight = EnumOptions { box_budget: 10_000, ..EnumOptions::with_eps(1e-14) };
        assert!(matches!(mean_k(&w, 2, 1, 1e4, &tight), Err(Error::Budget(_))));
    }
}
