//! Simulation of the nested occupancy scheme.
//!
//! Each ball draws an independent path `(xi_1, ..., xi_J)` from the weight
//! family; its generation-`j` box is the prefix of length `j`. Boxes are kept
//! in one hash map per generation keyed by `(parent box, last coordinate)`.
//! Counts of boxes holding at least `l` balls are updated incrementally, so a
//! snapshot costs `O(J L)` regardless of how many balls came before.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{invalid, Error, Result};
use crate::weights::WeightFamily;

/// Inverse-CDF lookup of a weight index from a uniform draw in `[0, 1)`.
///
/// Draws beyond the cached table (probability below `1e-17`) map to its last index.
pub fn sample_index(family: &WeightFamily, draw: f64) -> usize {
    let cdf = family.cumulative();
    let idx = cdf.partition_point(|&c| c <= draw);
    idx.min(cdf.len() - 1) + 1
}

/// Random number stream for one replica: the master seed keys the generator
/// and the replica index selects an independent stream.
pub fn replica_rng(master_seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replica);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemeShape {
    /// Deepest generation `J`.
    pub generations: usize,
    /// Largest reported level `L`.
    pub levels: usize,
}

impl SchemeShape {
    pub fn new(generations: usize, levels: usize) -> Result<Self> {
        if generations == 0 || levels == 0 {
            return Err(invalid("generations and levels must be at least 1"));
        }
        Ok(SchemeShape { generations, levels })
    }
}

/// Occupancy counts at each grid time for one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTrajectory {
    pub times: Vec<f64>,
    pub shape: SchemeShape,
    /// At-least counts for levels `1..=L+1`, indexed by [`Self::slot`].
    at_least: Vec<u64>,
    /// Balls sitting in boxes with more than `L` balls, per `(j, grid index)`.
    heavy: Vec<u64>,
    pub balls: Vec<u64>,
    pub master_seed: u64,
    pub replica: u64,
}

impl OccupancyTrajectory {
    fn new(times: Vec<f64>, shape: SchemeShape, master_seed: u64, replica: u64) -> Self {
        let m = times.len();
        OccupancyTrajectory {
            at_least: vec![0; shape.generations * (shape.levels + 1) * m],
            heavy: vec![0; shape.generations * m],
            balls: vec![0; m],
            times,
            shape,
            master_seed,
            replica,
        }
    }

    #[inline]
    fn slot(&self, j: usize, l: usize, i: usize) -> usize {
        ((j - 1) * (self.shape.levels + 1) + (l - 1)) * self.times.len() + i
    }

    /// Number of generation-`j` boxes with at least `l` balls at grid index `i`,
    /// for `1 <= l <= L + 1`.
    pub fn k(&self, j: usize, l: usize, i: usize) -> u64 {
        assert!(j >= 1 && j <= self.shape.generations, "generation out of range");
        assert!(l >= 1 && l <= self.shape.levels + 1, "level out of range");
        self.at_least[self.slot(j, l, i)]
    }

    /// Number of generation-`j` boxes with exactly `l` balls, `1 <= l <= L`.
    pub fn k_star(&self, j: usize, l: usize, i: usize) -> u64 {
        assert!(l <= self.shape.levels, "level out of range");
        self.k(j, l, i) - self.k(j, l + 1, i)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Checks the structural identities every trajectory must satisfy.
    pub fn check_invariants(&self) -> Result<()> {
        let (jj, ll) = (self.shape.generations, self.shape.levels);
        let fail = |msg: String| Err(Error::Numeric(format!("trajectory invariant: {msg}")));
        for i in 0..self.len() {
            let balls = self.balls[i];
            if i > 0 && balls < self.balls[i - 1] {
                return fail(format!("ball count decreased at grid index {i}"));
            }
            for j in 1..=jj {
                let mut mass = self.heavy[(j - 1) * self.len() + i];
                for l in 1..=ll {
                    mass += l as u64 * self.k_star(j, l, i);
                }
                if mass != balls {
                    return fail(format!("j={j} i={i}: occupied mass {mass} != balls {balls}"));
                }
                for l in 1..=ll + 1 {
                    let k = self.k(j, l, i);
                    if k * l as u64 > balls {
                        return fail(format!("j={j} l={l} i={i}: K={k} exceeds balls/l"));
                    }
                    if l > 1 && k > self.k(j, l - 1, i) {
                        return fail(format!("j={j} l={l} i={i}: at-least counts not monotone"));
                    }
                }
                if j > 1 && self.k(j, 1, i) < self.k(j - 1, 1, i) {
                    return fail(format!("j={j} i={i}: occupied boxes decreased across generations"));
                }
                if i > 0 && self.k(j, 1, i) < self.k(j, 1, i - 1) {
                    return fail(format!("j={j} i={i}: occupied boxes decreased in time"));
                }
            }
        }
        Ok(())
    }

    /// Appends rows `replica,j,l,grid_index,time,K,K_star,balls`.
    pub fn write_csv_rows<W: Write>(&self, out: &mut W) -> Result<()> {
        for j in 1..=self.shape.generations {
            for l in 1..=self.shape.levels {
                for i in 0..self.len() {
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{},{}",
                        self.replica,
                        j,
                        l,
                        i,
                        self.times[i],
                        self.k(j, l, i),
                        self.k_star(j, l, i),
                        self.balls[i]
                    )?;
                }
            }
        }
        Ok(())
    }
}

pub const TRAJECTORY_HEADER: &str = "replica,j,l,grid_index,time,K,K_star,balls";

/// Mutable occupancy state shared by both simulation modes.
struct Occupancy<'a> {
    family: &'a WeightFamily,
    shape: SchemeShape,
    /// One map per generation from `(parent box id, coordinate)` to box id.
    index: Vec<FxHashMap<(u32, u32), u32>>,
    /// Ball counts per box id, one vector per generation.
    counts: Vec<Vec<u32>>,
    /// At-least counts for levels `1..=L+1`, per generation.
    at_least: Vec<Vec<u64>>,
    heavy: Vec<u64>,
    balls: u64,
}

impl<'a> Occupancy<'a> {
    fn new(family: &'a WeightFamily, shape: SchemeShape) -> Self {
        let j = shape.generations;
        Occupancy {
            family,
            shape,
            index: (0..j).map(|_| FxHashMap::default()).collect(),
            counts: vec![Vec::new(); j],
            at_least: vec![vec![0; shape.levels + 1]; j],
            heavy: vec![0; j],
            balls: 0,
        }
    }

    fn throw<R: Rng>(&mut self, rng: &mut R) {
        let ll = self.shape.levels as u32;
        let mut parent = 0u32;
        for g in 0..self.shape.generations {
            let k = sample_index(self.family, rng.random::<f64>()) as u32;
            let fresh = self.counts[g].len() as u32;
            let id = *self.index[g].entry((parent, k)).or_insert(fresh);
            if id == fresh {
                self.counts[g].push(0);
            }
            let c = self.counts[g][id as usize];
            let c1 = c + 1;
            self.counts[g][id as usize] = c1;
            if c1 <= ll + 1 {
                self.at_least[g][c1 as usize - 1] += 1;
            }
            if c1 > ll {
                self.heavy[g] += if c1 == ll + 1 { c1 as u64 } else { 1 };
            }
            parent = id;
        }
        self.balls += 1;
    }

    fn snapshot(&self, traj: &mut OccupancyTrajectory, i: usize) {
        traj.balls[i] = self.balls;
        for j in 1..=self.shape.generations {
            for l in 1..=self.shape.levels + 1 {
                let s = traj.slot(j, l, i);
                traj.at_least[s] = self.at_least[j - 1][l - 1];
            }
            let m = traj.len();
            traj.heavy[(j - 1) * m + i] = self.heavy[j - 1];
        }
    }
}

fn check_nondecreasing(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(invalid("grid times must be finite and nonnegative"));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("grid times must be nondecreasing"));
    }
    Ok(())
}

/// Throws `n` balls one at a time and records counts after `grid[i]` balls.
pub fn simulate_deterministic(
    family: &WeightFamily,
    n: u64,
    shape: SchemeShape,
    grid: &[u64],
    master_seed: u64,
    replica: u64,
) -> Result<OccupancyTrajectory> {
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("grid must be nondecreasing"));
    }
    if let Some(&last) = grid.last() {
        if last > n {
            return Err(invalid(format!("grid point {last} exceeds ball count {n}")));
        }
    }
    let times = grid.iter().map(|&g| g as f64).collect();
    let mut traj = OccupancyTrajectory::new(times, shape, master_seed, replica);
    let mut occ = Occupancy::new(family, shape);
    let mut rng = replica_rng(master_seed, replica);
    let mut next = 0;
    while next < grid.len() && grid[next] == 0 {
        occ.snapshot(&mut traj, next);
        next += 1;
    }
    for b in 1..=n {
        occ.throw(&mut rng);
        while next < grid.len() && grid[next] == b {
            occ.snapshot(&mut traj, next);
            next += 1;
        }
    }
    debug_assert!(traj.check_invariants().is_ok());
    Ok(traj)
}

/// Poissonized scheme: between consecutive grid times a Poisson number of
/// fresh balls arrives, with mean equal to the elapsed time.
pub fn simulate_poissonized(
    family: &WeightFamily,
    times: &[f64],
    shape: SchemeShape,
    master_seed: u64,
    replica: u64,
) -> Result<OccupancyTrajectory> {
    check_nondecreasing(times)?;
    let mut traj = OccupancyTrajectory::new(times.to_vec(), shape, master_seed, replica);
    let mut occ = Occupancy::new(family, shape);
    let mut rng = replica_rng(master_seed, replica);
    let mut prev = 0.0;
    for (i, &t) in times.iter().enumerate() {
        let lambda = t - prev;
        let arrivals = if lambda > 0.0 {
            let dist = Poisson::new(lambda)
                .map_err(|e| Error::Numeric(format!("poisson mean {lambda}: {e}")))?;
            dist.sample(&mut rng) as u64
        } else {
            0
        };
        for _ in 0..arrivals {
            occ.throw(&mut rng);
        }
        occ.snapshot(&mut traj, i);
        prev = t;
    }
    debug_assert!(traj.check_invariants().is_ok());
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimulationMode {
    Poissonized { times: Vec<f64> },
    Deterministic { n: u64, grid: Vec<u64> },
}

/// Runs `replicas` independent trajectories in parallel; the result is
/// ordered by replica index and does not depend on the worker count.
pub fn simulate_replicas(
    family: &WeightFamily,
    mode: &SimulationMode,
    shape: SchemeShape,
    replicas: u64,
    master_seed: u64,
) -> Result<Vec<OccupancyTrajectory>> {
    (0..replicas)
        .into_par_iter()
        .map(|r| match mode {
            SimulationMode::Poissonized { times } => {
                simulate_poissonized(family, times, shape, master_seed, r)
            }
            SimulationMode::Deterministic { n, grid } => {
                simulate_deterministic(family, *n, shape, grid, master_seed, r)
            }
        })
        .collect()
}
