//! Uniform grids on an interval and piecewise-constant grid functions.
//!
//! Grid functions double as densities (values are density heights, so the
//! mass of cell `k` is `value[k] · h`) and as observables (values are the
//! function's height on the cell). Integration against intervals is exact:
//! each cell contributes its value times its overlap length.

use crate::geometry::{Interval, IntervalUnion};
use serde::{Deserialize, Serialize};

/// A uniform partition of an interval into `n` cells of width `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    interval: Interval,
    n: usize,
}

impl Grid {
    pub fn new(interval: Interval, n: usize) -> Self {
        assert!(n > 0, "grid needs at least one cell");
        assert!(!interval.is_degenerate(), "grid interval must have length");
        Self { interval, n }
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.interval.len() / self.n as f64
    }

    pub fn cell(&self, k: usize) -> Interval {
        debug_assert!(k < self.n);
        let h = self.h();
        let lo = self.interval.lo + k as f64 * h;
        let hi = if k + 1 == self.n {
            self.interval.hi
        } else {
            self.interval.lo + (k + 1) as f64 * h
        };
        Interval::new(lo, hi)
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        self.interval.lo + (k as f64 + 0.5) * self.h()
    }

    /// Index of the cell containing `x` (cells are half-open to the right;
    /// the endpoint belongs to the last cell). `x` is clamped to the grid.
    pub fn cell_of(&self, x: f64) -> usize {
        let t = (x - self.interval.lo) / self.h();
        (t.floor() as isize).clamp(0, self.n as isize - 1) as usize
    }

    /// Cells overlapping the interval with positive length, as
    /// `(index, overlap length)` pairs in index order.
    pub fn overlaps(&self, j: &Interval) -> Vec<(usize, f64)> {
        let Some(clip) = j.intersect(&self.interval) else {
            return Vec::new();
        };
        if clip.is_degenerate() {
            return Vec::new();
        }
        let k_lo = self.cell_of(clip.lo);
        let k_hi = self.cell_of(clip.hi.min(self.interval.hi));
        let mut out = Vec::with_capacity(k_hi - k_lo + 1);
        for k in k_lo..=k_hi {
            let w = self.cell(k).overlap_len(&clip);
            if w > 0.0 {
                out.push((k, w));
            }
        }
        out
    }

    /// Indices of cells whose midpoint lies in the union (the center rule
    /// for identifying a set with grid cells).
    pub fn cells_with_midpoint_in(&self, u: &IntervalUnion) -> Vec<usize> {
        (0..self.n)
            .filter(|&k| u.contains_closed(self.midpoint(k)))
            .collect()
    }
}

/// A piecewise-constant function on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.n(), "one value per cell");
        Self { grid, values }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        let n = grid.n();
        Self::new(grid, vec![c; n])
    }

    /// The uniform probability density on the grid's interval.
    pub fn uniform_density(grid: Grid) -> Self {
        let c = 1.0 / grid.interval().len();
        Self::constant(grid, c)
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.n()).map(|k| f(grid.midpoint(k))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.values[self.grid.cell_of(x)]
    }

    /// ∫ f over the whole grid interval.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.h()
    }

    /// ∫ |f|.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.h()
    }

    /// ∫ f over a union of intervals, exact for the piecewise-constant
    /// representation.
    pub fn integral_over(&self, u: &IntervalUnion) -> f64 {
        u.parts()
            .iter()
            .map(|p| {
                self.grid
                    .overlaps(p)
                    .into_iter()
                    .map(|(k, w)| self.values[k] * w)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Rescales so the integral is one; no-op for the zero function.
    pub fn normalize(&mut self) {
        let m = self.integral();
        if m != 0.0 {
            for v in &mut self.values {
                *v /= m;
            }
        }
    }
}
