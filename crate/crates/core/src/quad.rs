//! Globally adaptive Gauss-Kronrod (7/15) quadrature on finite intervals.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub error_estimate: f64,
    pub intervals: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for i in 0..7 {
        let dx = h * XGK[i];
        let pair = f(c - dx) + f(c + dx);
        kronrod += WGK[i] * pair;
        if i % 2 == 1 {
            gauss += WG[i / 2] * pair;
        }
    }
    Segment {
        a,
        b,
        value: kronrod * h,
        err: ((kronrod - gauss) * h).abs(),
    }
}

/// Integrates `f` over `[a, b]` until the summed error estimate is below `abs_tol`.
///
/// The interval is first cut into `initial` equal pieces so that narrow
/// features inside a wide window are not missed by the first rule.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    initial: usize,
    max_intervals: usize,
) -> Result<QuadResult> {
    let pieces = initial.max(1);
    let width = (b - a) / pieces as f64;
    let mut heap = BinaryHeap::with_capacity(max_intervals + 2);
    for i in 0..pieces {
        let lo = a + width * i as f64;
        let hi = if i + 1 == pieces { b } else { lo + width };
        heap.push(gk15(&f, lo, hi));
    }
    loop {
        let total_err: f64 = heap.iter().map(|s| s.err).sum();
        if total_err <= abs_tol {
            let mut segs: Vec<Segment> = heap.into_vec();
            segs.sort_by(|x, y| x.a.total_cmp(&y.a));
            let value = segs.iter().map(|s| s.value).sum();
            return Ok(QuadResult { value, error_estimate: total_err, intervals: segs.len() });
        }
        if heap.len() >= max_intervals {
            let worst = heap.peek().copied();
            return Err(Error::Numeric(format!(
                "quadrature on [{a}, {b}] stalled at error {total_err:e} after {} intervals; worst segment {:?}",
                heap.len(),
                worst.map(|s| (s.a, s.b, s.err))
            )));
        }
        let worst = heap.pop().expect("heap is nonempty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(Error::Numeric(format!(
                "quadrature cannot split [{}, {}] further (error {:e})",
                worst.a, worst.b, worst.err
            )));
        }
        heap.push(gk15(&f, worst.a, mid));
        heap.push(gk15(&f, mid, worst.b));
    }
}
