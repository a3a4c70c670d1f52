//! Sampling the Gaussian limit processes on a finite grid of offsets.
//!
//! The production path assembles the joint covariance of `(P_l(u))` over
//! levels and offsets, factors it, and maps standard normals through the
//! factor. A second sampler discretizes the white-noise integral for `Z_1`
//! directly, as an independent check of the covariance formulas.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::limits::{LimitCovQuery, LimitKind};
use crate::scheme::replica_rng;

/// First jitter tried when the plain factorization fails.
pub const JITTER_START: f64 = 1e-12;
/// Largest jitter accepted before the matrix is declared broken.
pub const JITTER_MAX: f64 = 1e-8;
/// Upper limit on white-noise mesh cells.
pub const MAX_CELLS: f64 = 1e8;

/// Joint covariance of a limit process over `levels x u_grid`.
#[derive(Debug, Clone)]
pub struct LimitCovarianceGrid {
    pub kind: LimitKind,
    pub u_grid: Vec<f64>,
    pub levels: u32,
    /// Entry `((l-1) m + i, (l'-1) m + i')` is `E P_l(u_i) P_{l'}(u_{i'})`.
    pub matrix: DMatrix<f64>,
    /// Smallest eigenvalue of `matrix` before any jitter.
    pub min_eigenvalue: f64,
    pub jitter_applied: f64,
    factor: DMatrix<f64>,
}

impl LimitCovarianceGrid {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Position of `(level, grid index)` in the flattened vector.
    pub fn index(&self, level: u32, i: usize) -> usize {
        (level as usize - 1) * self.u_grid.len() + i
    }

    /// Lower-triangular factor used by [`sample`].
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }
}

/// Fills and factors the covariance of `Z` or `X` over the grid.
///
/// Offsets must be nondecreasing; repeated offsets give a singular matrix that
/// the jitter policy absorbs.
pub fn build_grid(kind: LimitKind, u_grid: &[f64], levels: u32) -> Result<LimitCovarianceGrid> {
    if kind == LimitKind::Y {
        return Err(invalid("grids are built for Z or X processes"));
    }
    if u_grid.is_empty() || levels == 0 {
        return Err(invalid("grid needs at least one offset and one level"));
    }
    if u_grid.iter().any(|u| !u.is_finite()) || u_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("offsets must be finite and nondecreasing"));
    }
    let m = u_grid.len();
    let dim = m * levels as usize;
    let mut matrix = DMatrix::zeros(dim, dim);
    for l1 in 1..=levels {
        for (i, &u) in u_grid.iter().enumerate() {
            for l2 in 1..=levels {
                for (k, &v) in u_grid.iter().enumerate() {
                    let q = LimitCovQuery::new(kind, l1, l2, u - v)?;
                    matrix[((l1 as usize - 1) * m + i, (l2 as usize - 1) * m + k)] = q.closed_form();
                }
            }
        }
    }
    let matrix = (&matrix + matrix.transpose()) * 0.5;
    let min_eigenvalue = matrix.symmetric_eigenvalues().min();
    let (factor, jitter_applied) = factor_with_jitter(&matrix)?;
    Ok(LimitCovarianceGrid {
        kind,
        u_grid: u_grid.to_vec(),
        levels,
        matrix,
        min_eigenvalue,
        jitter_applied,
        factor,
    })
}

fn factor_with_jitter(matrix: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if let Some(c) = Cholesky::new(matrix.clone()) {
        return Ok((c.l(), 0.0));
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut shifted = matrix.clone();
        for d in 0..shifted.nrows() {
            shifted[(d, d)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c.l(), jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Numeric(format!(
        "covariance matrix not positive semidefinite within jitter {JITTER_MAX:e}"
    )))
}

/// `n x dim` matrix of independent draws; row `s` uses random stream `s` of `seed`.
pub fn sample(grid: &LimitCovarianceGrid, n: usize, seed: u64) -> DMatrix<f64> {
    let dim = grid.dim();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut rng = replica_rng(seed, s as u64);
            let z = DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(&mut rng)));
            (&grid.factor * z).iter().copied().collect()
        })
        .collect();
    DMatrix::from_fn(n, dim, |r, c| rows[r][c])
}

/// Mesh for the white-noise construction of `Z_1` on `[-A, A] x [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhiteNoiseMesh {
    pub half_width: f64,
    pub x_step: f64,
    pub y_step: f64,
}

impl WhiteNoiseMesh {
    pub fn new(half_width: f64, x_step: f64, y_step: f64) -> Result<Self> {
        if !(x_step > 0.0 && y_step > 0.0) {
            return Err(invalid("mesh steps must be positive"));
        }
        if !(half_width >= 30.0) {
            return Err(invalid(format!("window half-width must be at least 30, got {half_width}")));
        }
        let mesh = WhiteNoiseMesh { half_width, x_step, y_step };
        let cells = mesh.columns() as f64 * mesh.rows() as f64;
        if cells > MAX_CELLS {
            return Err(Error::Budget(format!("{cells:e} cells exceed the limit of {MAX_CELLS:e}")));
        }
        Ok(mesh)
    }

    pub fn columns(&self) -> usize {
        (2.0 * self.half_width / self.x_step).round().max(1.0) as usize
    }

    pub fn rows(&self) -> usize {
        (1.0 / self.y_step).round().max(1.0) as usize
    }

    fn x_center(&self, c: usize) -> f64 {
        let dx = 2.0 * self.half_width / self.columns() as f64;
        -self.half_width + (c as f64 + 0.5) * dx
    }
}

/// `exp(-e^{-(x-u)})`.
#[inline]
fn gumbel_cdf(x: f64, u: f64) -> f64 {
    (-(-(x - u)).exp()).exp()
}

/// Per-column data: for each `u`, the number of cells below the level curve
/// and the curve height.
struct Column {
    counts: Vec<usize>,
    heights: Vec<f64>,
    /// Distinct counts in increasing order, excluding 0 and the full column.
    cuts: Vec<usize>,
}

fn columns_for(mesh: &WhiteNoiseMesh, u_grid: &[f64]) -> Vec<Column> {
    let rows = mesh.rows();
    let dy = 1.0 / rows as f64;
    (0..mesh.columns())
        .map(|c| {
            let x = mesh.x_center(c);
            let heights: Vec<f64> = u_grid.iter().map(|&u| gumbel_cdf(x, u)).collect();
            // cells with center (r + 1/2) dy <= h
            let counts: Vec<usize> = heights
                .iter()
                .map(|&h| ((h / dy + 0.5).floor() as usize).min(rows))
                .collect();
            let mut cuts: Vec<usize> = counts.iter().copied().filter(|&k| k > 0 && k < rows).collect();
            cuts.sort_unstable();
            cuts.dedup();
            Column { counts, heights, cuts }
        })
        .collect()
}

/// Draws of `Z_1(u)` over the grid, all offsets sharing one noise realization
/// per sample.
///
/// Each cell carries an independent `N(0, area)` weight and the integrand is
/// evaluated at cell centres. Within a column the integrand only depends on
/// whether a cell lies below the curve `y = exp(-e^{-(x-u)})`, so only the
/// partial sums of the column weights at the needed cut points are drawn;
/// they form a Gaussian random walk and this is exact for the discretized
/// integral.
pub fn sample_z1_whitenoise(u_grid: &[f64], mesh: &WhiteNoiseMesh, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if u_grid.is_empty() || u_grid.iter().any(|u| !u.is_finite()) {
        return Err(invalid("offsets must be finite and nonempty"));
    }
    let columns = columns_for(mesh, u_grid);
    let rows = mesh.rows();
    let cell_sd = (2.0 * mesh.half_width / mesh.columns() as f64 / rows as f64).sqrt();
    let m = u_grid.len();
    let draws: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut rng = replica_rng(seed, s as u64);
            let mut out = vec![0.0; m];
            let mut partial = Vec::with_capacity(8);
            for col in &columns {
                if col.heights.iter().all(|&h| h == 0.0) {
                    // integrand vanishes identically on this column
                    continue;
                }
                // partial sums at each cut, then the full column total
                partial.clear();
                let mut acc = 0.0;
                let mut prev = 0usize;
                for &k in &col.cuts {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    acc += z * cell_sd * ((k - prev) as f64).sqrt();
                    partial.push(acc);
                    prev = k;
                }
                let z: f64 = StandardNormal.sample(&mut rng);
                let total = acc + z * cell_sd * ((rows - prev) as f64).sqrt();
                for (i, (&k, &h)) in col.counts.iter().zip(&col.heights).enumerate() {
                    let below = if k == 0 {
                        0.0
                    } else if k == rows {
                        total
                    } else {
                        partial[col.cuts.binary_search(&k).expect("cut present")]
                    };
                    out[i] -= below - h * total;
                }
            }
            out
        })
        .collect();
    Ok(DMatrix::from_fn(n, m, |r, c| draws[r][c]))
}

/// Deterministic `sum_cells area (1{y <= h} - h)^2` at offset `u`, the mesh
/// analogue of `Var Z_1(u) = log 2`.
pub fn whitenoise_l2_norm(mesh: &WhiteNoiseMesh, u: f64) -> f64 {
    let rows = mesh.rows();
    let dx = 2.0 * mesh.half_width / mesh.columns() as f64;
    let dy = 1.0 / rows as f64;
    let mut s = crate::kernels::KahanSum::new();
    for c in 0..mesh.columns() {
        let h = gumbel_cdf(mesh.x_center(c), u);
        let k = ((h / dy + 0.5).floor() as usize).min(rows) as f64;
        s.add(dx * dy * (k * (1.0 - h) * (1.0 - h) + (rows as f64 - k) * h * h));
    }
    s.value()
}

/// Empirical covariance matrix of the rows of `draws` (columns are coordinates).
pub fn empirical_covariance(draws: &DMatrix<f64>) -> DMatrix<f64> {
    let n = draws.nrows() as f64;
    let mean = draws.row_mean();
    let centred = DMatrix::from_fn(draws.nrows(), draws.ncols(), |r, c| draws[(r, c)] - mean[c]);
    (centred.transpose() * &centred) / (n - 1.0)
}

pub const SAMPLE_HEADER: &str = "sample_id,level,u,value";

/// Rows `sample_id,level,u,value` for draws laid out by level then offset.
pub fn write_samples<W: Write>(out: &mut W, draws: &DMatrix<f64>, u_grid: &[f64], levels: u32) -> Result<()> {
    let m = u_grid.len();
    for s in 0..draws.nrows() {
        for l in 1..=levels {
            for (i, u) in u_grid.iter().enumerate() {
                writeln!(out, "{},{},{},{}", s, l, u, draws[(s, (l as usize - 1) * m + i)])?;
            }
        }
    }
    Ok(())
}
