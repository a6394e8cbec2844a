//! Discretizations of the time interval, the mark space and the dyadic
//! partition semiring used by the non-anticipating derivative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered time points `0 = t_0 < t_1 < ... < t_M = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
    uniform: bool,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::invalid("a time grid needs at least one step"));
        }
        let dt = horizon / n_steps as f64;
        let mut points: Vec<f64> = (0..=n_steps).map(|i| i as f64 * dt).collect();
        points[n_steps] = horizon;
        Ok(Self { points, uniform: true })
    }

    /// Build from explicit points; the uniform flag is inferred.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("a time grid needs at least two points"));
        }
        if points[0] != 0.0 {
            return Err(Error::invalid("a time grid must start at 0"));
        }
        if points.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::invalid("time points must be finite and strictly increasing"));
        }
        let h0 = points[1] - points[0];
        let uniform = points
            .windows(2)
            .all(|w| ((w[1] - w[0]) - h0).abs() <= 1e-12 * h0.abs().max(1.0));
        Ok(Self { points, uniform })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn t(&self, i: usize) -> f64 {
        self.points[i]
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.points[i + 1] - self.points[i]
    }

    /// Nominal step `T / M`, exact for uniform grids.
    pub fn step(&self) -> f64 {
        self.horizon() / self.n_steps() as f64
    }

    /// Index of the grid point closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        let mut gap = f64::INFINITY;
        for (i, &p) in self.points.iter().enumerate() {
            let d = (p - t).abs();
            if d < gap {
                gap = d;
                best = i;
            }
        }
        best
    }
}

/// Finite atomic discretization of the Lévy measure on `R \ {0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkGrid {
    z_points: Vec<f64>,
    weights: Vec<f64>,
}

impl MarkGrid {
    pub fn new(z_points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if z_points.len() != weights.len() {
            return Err(Error::invalid("mark points and weights differ in length"));
        }
        if z_points.iter().any(|z| *z == 0.0 || !z.is_finite()) {
            return Err(Error::invalid("mark points must be finite and nonzero"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("mark weights must be finite and nonnegative"));
        }
        Ok(Self { z_points, weights })
    }

    /// No jump channel at all.
    pub fn empty() -> Self {
        Self { z_points: Vec::new(), weights: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.z_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_points.is_empty()
    }

    pub fn z(&self, j: usize) -> f64 {
        self.z_points[j]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn z_points(&self) -> &[f64] {
        &self.z_points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `∫ z² ν(dz)` over the grid.
    pub fn second_moment(&self) -> f64 {
        self.z_points.iter().zip(&self.weights).map(|(z, w)| z * z * w).sum()
    }
}

/// Mark component of a partition cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MarkSet {
    /// `{0}`: the conditional Gaussian channel.
    Gauss,
    /// One atom of the mark grid.
    Bin(usize),
}

impl MarkSet {
    /// Stable id used in CSV dumps: 0 for the Gaussian channel, `j + 1` for bin `j`.
    pub fn id(&self) -> usize {
        match self {
            MarkSet::Gauss => 0,
            MarkSet::Bin(j) => j + 1,
        }
    }
}

/// `Δ = (s, u] × B` with grid-aligned time endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub start_index: usize,
    pub end_index: usize,
    pub start: f64,
    pub end: f64,
    pub marks: MarkSet,
}

impl Cell {
    /// Whether the point `(t, slot)` lies in the cell; time is left-open.
    pub fn contains(&self, t: f64, marks: MarkSet) -> bool {
        self.marks == marks && t > self.start && t <= self.end
    }

    /// Grid steps `i` whose increments `(t_i, t_{i+1}]` make up the cell.
    pub fn steps(&self) -> std::ops::Range<usize> {
        self.start_index..self.end_index
    }
}

/// Level-`n` dyadic partition of `(0, T] × ({0} ∪ mark bins)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionScheme {
    level: u32,
    n_steps: usize,
    n_bins: usize,
    cells: Vec<Cell>,
}

impl PartitionScheme {
    pub fn build(grid: &TimeGrid, marks: &MarkGrid, level: u32) -> Result<Self> {
        let n_steps = grid.n_steps();
        let n_intervals = 1usize
            .checked_shl(level)
            .ok_or_else(|| Error::invalid(format!("refinement level {level} too large")))?;
        if n_intervals > n_steps || n_steps % n_intervals != 0 {
            return Err(Error::invalid(format!(
                "refinement level {level} needs 2^{level} to divide the {n_steps} grid steps"
            )));
        }
        let per = n_steps / n_intervals;
        let mut cells = Vec::with_capacity(n_intervals * (1 + marks.len()));
        for k in 0..n_intervals {
            let (a, b) = (k * per, (k + 1) * per);
            let sets = std::iter::once(MarkSet::Gauss).chain((0..marks.len()).map(MarkSet::Bin));
            for set in sets {
                cells.push(Cell {
                    start_index: a,
                    end_index: b,
                    start: grid.t(a),
                    end: grid.t(b),
                    marks: set,
                });
            }
        }
        Ok(Self { level, n_steps, n_bins: marks.len(), cells })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_intervals(&self) -> usize {
        1 << self.level
    }

    /// Index of the cell holding grid step `i` on the given mark set.
    pub fn cell_of_step(&self, i: usize, marks: MarkSet) -> usize {
        let per = self.n_steps / self.n_intervals();
        let k = i / per;
        k * (1 + self.n_bins) + marks.id()
    }

    /// Whether every cell of `self` lies in exactly one cell of `coarser`.
    pub fn refines(&self, coarser: &PartitionScheme) -> bool {
        self.cells.iter().all(|c| {
            coarser
                .cells
                .iter()
                .filter(|p| {
                    p.marks == c.marks && p.start_index <= c.start_index && c.end_index <= p.end_index
                })
                .count()
                == 1
        })
    }
}
