//! Cell-to-cell (Ulam) discretizations of the transfer operators.
//!
//! Three operators are built on uniform grids: the deterministic operator of
//! a component map (exact interval-overlap entries), the noisy-chain
//! operator on the ambient interval (exact in the landing variable, midpoint
//! quadrature in the starting variable), and the σ-averaged restricted
//! operator of a component (exact per-σ matrices averaged by stratified
//! quadrature over the master draw).
//!
//! Orientation is fixed once: `matrix[k][l]` is the probability mass sent
//! from cell `k` to cell `l`, every row sums to one, densities act from the
//! left (`p ← p·M`), observables from the right. Bounded-variation norms of
//! grid functions use the discrete total variation of the cell values plus
//! the L¹ norm.

use crate::geometry::{Interval, IntervalUnion};
use crate::grid::{Grid, GridFunction};
use crate::linalg;
use crate::maps::{MapError, PiecewiseLinearMap, WellId};
use crate::noise::{NoiseError, TransitionKernel};
use crate::scenarios::Scenario;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Starting-variable quadrature points per cell for the noisy operator.
pub const DEFAULT_POINTS_PER_CELL: usize = 32;
/// Master-draw quadrature nodes per sign stratum for the restricted operator.
pub const DEFAULT_SIGMA_NODES: usize = 32;
/// Iteration cap before the stationary solver falls over to a direct solve.
pub const POWER_ITERATION_CAP: usize = 100_000;
/// Step budget for the mixing-time search.
pub const MIX_STEP_BUDGET: usize = 10_000;
/// Additive slack, relative to the BV norm of the test function, granted to
/// the contraction inequality check.
pub const LY_SLACK: f64 = 1e-6;

const DENSE_EIGEN_LIMIT: usize = 2048;

#[derive(Debug, Error)]
pub enum UlamError {
    #[error("cell width {h} exceeds a branch domain of width {width}; refine the grid")]
    DegenerateCell { h: f64, width: f64 },
    #[error("iteration did not converge (residual {residual})")]
    NoConvergence { residual: f64 },
    #[error("operators live on different grids")]
    GridMismatch,
    #[error("mixing-time search exceeded {cap} steps")]
    Budget { cap: usize },
    #[error("restricted map exits its component at sigma = {sigma}")]
    RestrictedEscapes { sigma: f64 },
    #[error("linear-algebra backend: {0}")]
    Backend(String),
    #[error(transparent)]
    Unconfined(#[from] NoiseError),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Which kernel a matrix discretizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Deterministic,
    Perturbed,
    Restricted(WellId),
    /// Time reversal of another operator with respect to its stationary
    /// density.
    Adjoint,
}

/// A row-stochastic cell-transition matrix on a grid.
#[derive(Debug, Clone)]
pub struct UlamOperator {
    grid: Grid,
    kind: OperatorKind,
    /// Sparse rows: `(column, mass)` pairs sorted by column.
    rows: Vec<Vec<(usize, f64)>>,
}

impl UlamOperator {
    /// Wraps externally assembled rows, checking nonnegativity and row sums.
    pub fn from_rows(
        grid: Grid,
        kind: OperatorKind,
        rows: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self, UlamError> {
        assert_eq!(rows.len(), grid.n(), "one row per cell");
        for row in &rows {
            let mut sum = 0.0;
            for &(col, v) in row {
                assert!(col < grid.n(), "column index out of range");
                assert!(v >= 0.0, "negative transition mass");
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(UlamError::NoConvergence {
                    residual: (sum - 1.0).abs(),
                });
            }
        }
        let rows = rows.into_iter().map(merge_columns).collect();
        Ok(Self { grid, kind, rows })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(_, v)| v).sum())
            .collect()
    }

    /// Density pushforward `p·M` on raw cell values.
    pub fn apply_left(&self, p: &[f64]) -> Vec<f64> {
        assert_eq!(p.len(), self.n_cells());
        let mut out = vec![0.0; p.len()];
        for (k, row) in self.rows.iter().enumerate() {
            let w = p[k];
            if w != 0.0 {
                for &(l, v) in row {
                    out[l] += w * v;
                }
            }
        }
        out
    }

    /// Observable pullback `M·g` on raw cell values.
    pub fn apply_right(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.n_cells());
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(l, v)| v * g[l]).sum())
            .collect()
    }

    /// One application of the operator to a density.
    pub fn push_density(&self, f: &GridFunction) -> GridFunction {
        assert_eq!(f.grid(), self.grid, "grid mismatch");
        GridFunction::new(self.grid, self.apply_left(f.values()))
    }
}

/// Sorts by column and sums duplicates, keeping encounter order within a
/// column so the result does not depend on thread scheduling.
fn merge_columns(mut entries: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    entries.sort_by_key(|&(col, _)| col);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
    for (col, v) in entries {
        match out.last_mut() {
            Some(last) if last.0 == col => last.1 += v,
            _ => out.push((col, v)),
        }
    }
    out
}

/// Exact rows of the deterministic transfer operator of `map`'s component
/// `id` on `grid`: `M[k][l] = Leb(cell_k ∩ T⁻¹(cell_l)) / h`, from affine
/// interval overlaps.
fn deterministic_rows(
    map: &PiecewiseLinearMap,
    id: WellId,
    grid: Grid,
) -> Result<Vec<Vec<(usize, f64)>>, UlamError> {
    let comp = map.component(id)?;
    let h = grid.h();
    let rows = (0..grid.n())
        .into_par_iter()
        .map(|k| {
            let cell = grid.cell(k);
            let mut acc = Vec::new();
            for b in comp.branches() {
                let Some(overlap) = b.domain().intersect(&cell) else {
                    continue;
                };
                if overlap.is_degenerate() {
                    continue;
                }
                let ya = b.eval(overlap.lo);
                let yb = b.eval(overlap.hi);
                let image = Interval::new(ya.min(yb), ya.max(yb));
                let scale = 1.0 / (b.slope().abs() * h);
                for (l, w) in grid.overlaps(&image) {
                    acc.push((l, w * scale));
                }
            }
            merge_columns(acc)
        })
        .collect();
    Ok(rows)
}

/// Discretizes the deterministic component map exactly. The grid must
/// resolve every branch (`h` no wider than the narrowest branch domain).
pub fn build_deterministic(
    map: &PiecewiseLinearMap,
    id: WellId,
    n_cells: usize,
) -> Result<UlamOperator, UlamError> {
    assert!(n_cells >= 64, "use at least 64 cells");
    let comp = map.component(id)?;
    let grid = Grid::new(comp.interval(), n_cells);
    let h = grid.h();
    let narrowest = comp
        .branches()
        .iter()
        .map(|b| b.domain().len())
        .fold(f64::INFINITY, f64::min);
    if narrowest < h {
        return Err(UlamError::DegenerateCell {
            h,
            width: narrowest,
        });
    }
    Ok(UlamOperator {
        grid,
        kind: OperatorKind::Deterministic,
        rows: deterministic_rows(map, id, grid)?,
    })
}

/// Discretizes the noisy chain on the ambient interval. Landing mass per
/// cell is exact (law CDF differences); the starting variable is integrated
/// by a midpoint rule with at least `points_per_cell` nodes per cell, split
/// at branch and noise-region boundaries so every node sees a single affine
/// piece and a single law.
///
/// Requires a confined kernel: noise that could push the state out of the
/// ambient interval would silently lose mass here.
pub fn build_perturbed(
    kernel: &TransitionKernel,
    n_cells: usize,
    points_per_cell: usize,
) -> Result<UlamOperator, UlamError> {
    assert!(n_cells >= 64, "use at least 64 cells");
    assert!(points_per_cell >= 1);
    kernel.ensure_confined()?;
    let grid = Grid::new(kernel.map.ambient(), n_cells);
    let h = grid.h();

    let mut breaks: Vec<f64> = Vec::new();
    for c in kernel.map.components() {
        for b in c.branches() {
            breaks.push(b.domain().lo);
            breaks.push(b.domain().hi);
        }
    }
    for r in kernel.noise.regions() {
        breaks.push(r.interval.lo);
        breaks.push(r.interval.hi);
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let rows: Result<Vec<_>, UlamError> = (0..n_cells)
        .into_par_iter()
        .map(|k| {
            let cell = grid.cell(k);
            let mut cuts = vec![cell.lo];
            cuts.extend(breaks.iter().copied().filter(|&x| x > cell.lo && x < cell.hi));
            cuts.push(cell.hi);
            let mut dense = vec![0.0; n_cells];
            for seg in cuts.windows(2) {
                let (a, c) = (seg[0], seg[1]);
                if c - a <= 1e-15 {
                    continue;
                }
                let m = ((points_per_cell as f64) * (c - a) / h).ceil().max(1.0) as usize;
                let wt = (c - a) / (m as f64 * h);
                for j in 0..m {
                    let x = a + (j as f64 + 0.5) * (c - a) / m as f64;
                    let t = kernel.map.eval(x)?;
                    let law = kernel.noise.region_at(x)?.law;
                    let (off_lo, off_hi) = law.support();
                    let support = Interval::new(t + off_lo, t + off_hi);
                    for (l, _) in grid.overlaps(&support) {
                        let target = grid.cell(l);
                        let mass = law.cdf(target.hi - t) - law.cdf(target.lo - t);
                        if mass > 0.0 {
                            dense[l] += wt * mass;
                        }
                    }
                }
            }
            Ok(dense
                .into_iter()
                .enumerate()
                .filter(|&(_, v)| v != 0.0)
                .collect::<Vec<_>>())
        })
        .collect();
    Ok(UlamOperator {
        grid,
        kind: OperatorKind::Perturbed,
        rows: rows?,
    })
}

/// Midpoint nodes of the master-draw law `U(−ε, ε^q)`, stratified by sign:
/// `(σ, weight)` with the negative stratum carrying mass `ε/(ε+ε^q)` and the
/// positive stratum `ε^q/(ε+ε^q)`.
fn sigma_nodes(epsilon: f64, exponent_q: f64, per_stratum: usize) -> Vec<(f64, f64)> {
    let eq = epsilon.powf(exponent_q);
    let total = epsilon + eq;
    let m = per_stratum as f64;
    let mut nodes = Vec::with_capacity(2 * per_stratum);
    for j in 0..per_stratum {
        let sigma = -epsilon + (j as f64 + 0.5) * epsilon / m;
        nodes.push((sigma, epsilon / total / m));
    }
    for j in 0..per_stratum {
        let sigma = (j as f64 + 0.5) * eq / m;
        nodes.push((sigma, eq / total / m));
    }
    nodes
}

/// Discretizes the σ-averaged restricted operator of component `id`: each
/// master-draw node yields an exact matrix of the folded map, and the nodes
/// are combined with their stratum weights.
pub fn build_restricted(
    scenario: &Scenario,
    id: WellId,
    epsilon: f64,
    exponent_q: f64,
    n_cells: usize,
    nodes_per_stratum: usize,
) -> Result<UlamOperator, UlamError> {
    assert!(n_cells >= 64, "use at least 64 cells");
    assert!(nodes_per_stratum >= 1);
    let comp = scenario.map.component(id)?;
    let iv = comp.interval();
    let grid = Grid::new(iv, n_cells);
    let nodes = sigma_nodes(epsilon, exponent_q, nodes_per_stratum);

    let per_node: Result<Vec<_>, UlamError> = nodes
        .par_iter()
        .map(|&(sigma, _)| {
            let restricted = scenario.restricted(id, sigma)?;
            let rcomp = restricted.component(WellId(1))?;
            for b in rcomp.branches() {
                let im = b.image();
                // full branches over narrow windows are steep; allow their
                // evaluation rounding (∝ slope · ulp) on top of the base slack
                let tol = 1e-9 + b.slope().abs() * f64::EPSILON;
                if im.lo < iv.lo - tol || im.hi > iv.hi + tol {
                    return Err(UlamError::RestrictedEscapes { sigma });
                }
            }
            deterministic_rows(&restricted, WellId(1), grid)
        })
        .collect();
    let per_node = per_node?;

    let rows: Vec<Vec<(usize, f64)>> = (0..n_cells)
        .into_par_iter()
        .map(|k| {
            let mut acc = Vec::new();
            for (rows_sigma, &(_, weight)) in per_node.iter().zip(&nodes) {
                for &(l, v) in &rows_sigma[k] {
                    acc.push((l, weight * v));
                }
            }
            merge_columns(acc)
        })
        .collect();

    Ok(UlamOperator {
        grid,
        kind: OperatorKind::Restricted(id),
        rows,
    })
}

/// The stationary density of the operator: power iteration on the left
/// action until the successive L¹ change drops below `tol`, falling over to
/// a direct solve of the stationarity system if the cap is hit.
pub fn stationary_density(op: &UlamOperator, tol: f64) -> Result<GridFunction, UlamError> {
    assert!(tol > 0.0);
    let n = op.n_cells();
    let h = op.grid.h();
    let mut p = vec![1.0 / op.grid.interval().len(); n];
    for _ in 0..POWER_ITERATION_CAP {
        let mut q = op.apply_left(&p);
        let mass: f64 = q.iter().sum::<f64>() * h;
        if mass > 0.0 {
            for v in &mut q {
                *v /= mass;
            }
        }
        let change: f64 = q.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() * h;
        p = q;
        if change < tol {
            return Ok(GridFunction::new(op.grid, p));
        }
    }

    // Direct solve: p·M = p with the last equation replaced by the mass
    // normalization Σ p_k = 1/h.
    let mut triplets = Vec::new();
    for (k, row) in op.rows.iter().enumerate() {
        for &(l, v) in row {
            if l < n - 1 {
                triplets.push((l, k, v));
            }
        }
    }
    for i in 0..n - 1 {
        triplets.push((i, i, -1.0));
    }
    for j in 0..n {
        triplets.push((n - 1, j, 1.0));
    }
    let mut rhs = vec![0.0; n];
    rhs[n - 1] = 1.0 / h;
    let solver = linalg::SparseSolver::new(n, &triplets).map_err(UlamError::Backend)?;
    let mut x = solver.solve(&rhs);
    for v in &mut x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mass: f64 = x.iter().sum::<f64>() * h;
    if mass > 0.0 {
        for v in &mut x {
            *v /= mass;
        }
    }
    let residual: f64 = op
        .apply_left(&x)
        .iter()
        .zip(&x)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        * h;
    if residual <= (10.0 * tol).max(1e-8) {
        Ok(GridFunction::new(op.grid, x))
    } else {
        Err(UlamError::NoConvergence { residual })
    }
}

/// Modulus of the second-largest eigenvalue with convergence diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct SpectralEstimate {
    pub modulus: f64,
    /// Distance of the leading modulus from 1 (stochasticity witness).
    pub leading_residual: f64,
    /// True when the second modulus ties the first (no spectral gap at all,
    /// e.g. the identity matrix).
    pub degenerate: bool,
}

/// Second-largest eigenvalue modulus: dense solve up to 2048 cells, deflated
/// power iteration above.
pub fn second_eigenvalue(op: &UlamOperator) -> Result<SpectralEstimate, UlamError> {
    let n = op.n_cells();
    if n <= DENSE_EIGEN_LIMIT {
        let mut dense = vec![0.0f64; n * n];
        for (k, row) in op.rows.iter().enumerate() {
            for &(l, v) in row {
                dense[k * n + l] = v;
            }
        }
        let moduli =
            linalg::eigenvalue_moduli(n, |i, j| dense[i * n + j]).map_err(UlamError::Backend)?;
        return Ok(SpectralEstimate {
            modulus: moduli[1],
            leading_residual: (moduli[0] - 1.0).abs(),
            degenerate: moduli[1] >= 1.0 - 1e-12,
        });
    }

    // Deflate the known leading pair (left: stationary density, right: the
    // constant vector) and power-iterate the remainder.
    let p = stationary_density(op, 1e-12)?;
    let h = op.grid.h();
    let deflate = |v: &mut Vec<f64>| {
        let total: f64 = v.iter().sum::<f64>() * h;
        for (vi, pi) in v.iter_mut().zip(p.values()) {
            *vi -= total * pi;
        }
    };
    // fixed-seed random start: generic against any eigenvector structure,
    // still fully reproducible
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    deflate(&mut v);
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_ITERATION_CAP {
        let mut w = op.apply_left(&v);
        deflate(&mut w);
        let vv: f64 = v.iter().map(|x| x * x).sum();
        if vv == 0.0 {
            break;
        }
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / vv;
        residual = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (b - lambda * a).powi(2))
            .sum::<f64>()
            .sqrt()
            / vv.sqrt();
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        for x in &mut w {
            *x /= norm;
        }
        v = w;
        if residual < 1e-10 {
            break;
        }
    }
    if residual > 1e-8 {
        return Err(UlamError::NoConvergence { residual });
    }
    Ok(SpectralEstimate {
        modulus: lambda.abs(),
        leading_residual: 0.0,
        degenerate: lambda.abs() >= 1.0 - 1e-12,
    })
}

/// Discrete bounded-variation norm: total variation of the cell values plus
/// the L¹ norm.
pub fn bv_norm(f: &GridFunction) -> f64 {
    let tv: f64 = f
        .values()
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .sum::<f64>();
    tv + f.l1_norm()
}

/// Outcome of the contraction-inequality sweep over sampled configurations
/// and random test functions.
#[derive(Debug, Clone)]
pub struct LyReport {
    pub omega_trials: usize,
    pub f_trials: usize,
    pub violations: usize,
    /// Smallest observed value of `bound − ‖P F‖_BV` (negative = violation).
    pub worst_margin: f64,
}

/// Checks `‖P̃_ω F‖_BV ≤ (2/s)‖F‖_BV + (2/ℓ)‖F‖₁ + slack·‖F‖_BV` for
/// `omega_trials` sampled master draws and `f_trials` random test functions
/// per draw, on the exact per-σ restricted matrices.
#[allow(clippy::too_many_arguments)]
pub fn ly_check(
    scenario: &Scenario,
    id: WellId,
    epsilon: f64,
    exponent_q: f64,
    n_cells: usize,
    s: f64,
    ell: f64,
    omega_trials: usize,
    f_trials: usize,
    seed: u64,
) -> Result<LyReport, UlamError> {
    assert!(s > 2.0, "needs expansion factor above 2");
    assert!(ell > 0.0);
    let comp = scenario.map.component(id)?;
    let grid = Grid::new(comp.interval(), n_cells);
    let eq = epsilon.powf(exponent_q);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..omega_trials {
        let u: f64 = rng.random();
        let sigma = -epsilon + u * (epsilon + eq);
        let restricted = scenario.restricted(id, sigma)?;
        let rows = deterministic_rows(&restricted, WellId(1), grid)?;
        for _ in 0..f_trials {
            let values: Vec<f64> = (0..n_cells).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let f = GridFunction::new(grid, values);
            let bv = bv_norm(&f);
            let l1 = f.l1_norm();
            let mut pushed = vec![0.0; n_cells];
            for (k, row) in rows.iter().enumerate() {
                let w = f.values()[k];
                if w != 0.0 {
                    for &(l, v) in row {
                        pushed[l] += w * v;
                    }
                }
            }
            let after = bv_norm(&GridFunction::new(grid, pushed));
            let margin = (2.0 / s) * bv + (2.0 / ell) * l1 + LY_SLACK * bv - after;
            if margin < 0.0 {
                violations += 1;
            }
            worst = worst.min(margin);
        }
    }
    Ok(LyReport {
        omega_trials,
        f_trials,
        violations,
        worst_margin: worst,
    })
}

/// Estimated supremum over the BV unit ball of `‖(A − B)F‖₁`, from the
/// complete dyadic-indicator family plus `trials` random test functions.
/// This is a certified lower bound for the true supremum, not the supremum
/// itself.
pub fn operator_distance(
    a: &UlamOperator,
    b: &UlamOperator,
    trials: usize,
    seed: u64,
) -> Result<f64, UlamError> {
    if a.grid != b.grid {
        return Err(UlamError::GridMismatch);
    }
    let n = a.n_cells();
    let h = a.grid.h();
    let diff: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|k| {
            let mut acc = a.rows[k].clone();
            acc.extend(b.rows[k].iter().map(|&(l, v)| (l, -v)));
            merge_columns(acc)
        })
        .collect();
    let l1_of_push = |values: &[f64]| -> f64 {
        let mut out = vec![0.0; n];
        for (k, row) in diff.iter().enumerate() {
            let w = values[k];
            if w != 0.0 {
                for &(l, v) in row {
                    out[l] += w * v;
                }
            }
        }
        out.iter().map(|v| v.abs()).sum::<f64>() * h
    };

    let mut best: f64 = 0.0;

    // Dyadic blocks of cells, scaled to unit BV norm.
    let mut stack = vec![(0usize, n)];
    while let Some((lo, hi)) = stack.pop() {
        let tv = (lo > 0) as usize as f64 + (hi < n) as usize as f64;
        let bv = tv + (hi - lo) as f64 * h;
        let mut values = vec![0.0; n];
        for v in &mut values[lo..hi] {
            *v = 1.0 / bv;
        }
        best = best.max(l1_of_push(&values));
        if hi - lo >= 2 {
            let mid = lo + (hi - lo) / 2;
            stack.push((lo, mid));
            stack.push((mid, hi));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let mut values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let bv = bv_norm(&GridFunction::new(a.grid, values.clone()));
        if bv > 0.0 {
            for v in &mut values {
                *v /= bv;
            }
            best = best.max(l1_of_push(&values));
        }
    }
    Ok(best)
}

/// Analytic upper bound on the closeness of the deterministic and restricted
/// two-well operators, `sup‖(P − P̃_ε)F‖₁/‖F‖_BV`, from the exact fold
/// geometry. Averages, over the master draw, three error sources:
///
/// * the strip where only the folded map places mass (fold-branch strips of
///   total width `σ/(1−2b)`, values bounded through the sup-norm embedding),
/// * the band `[b, b+σ]` where the two operators use different branch
///   counts, bounded by the operator norms on it,
/// * the uniform displacement of the surviving inverse branches (`|σ|/s`
///   each), bounded through the total variation.
///
/// Decays linearly in ε; the measured estimate must sit below it.
pub fn closeness_bound_two_well(b: f64, epsilon: f64, exponent_q: f64) -> f64 {
    assert!(b > 0.0 && b < 0.25);
    let s = 4.0 - 8.0 * b;
    let gamma = 2.0 / s;
    let big_d = 2.0 / (0.5 - b);
    let eq = epsilon.powf(exponent_q);
    let total = epsilon + eq;
    // Negative draws: displacement of all four branches plus the two support
    // mismatch strips of width |σ| at the image edges.
    let neg = (8.0 / (s * s) + 4.0 * (gamma + big_d)) * epsilon * epsilon / 2.0;
    // Positive draws: displacement, fold strips, the differing band, and the
    // fold-branch mass with the σ-dependent fold slope integrated exactly.
    let pos = (8.0 / (s * s) + 2.0 / (1.0 - 2.0 * b) + 2.0 * (gamma + big_d)) * eq * eq / 2.0
        + 4.0 * eq * eq * eq / (3.0 * (0.5 - b) * (2.0 - 4.0 * b));
    (neg + pos) / total
}

/// `n`-step density: `n − 1` applications of the operator, so `n = 1`
/// returns the initial density unchanged.
pub fn n_step_density(op: &UlamOperator, initial: &GridFunction, n: usize) -> GridFunction {
    assert!(n >= 1);
    assert_eq!(initial.grid(), op.grid, "grid mismatch");
    let mut values = initial.values().to_vec();
    for _ in 1..n {
        values = op.apply_left(&values);
    }
    GridFunction::new(op.grid, values)
}

/// One-step landing density of the restricted dynamics started at `x`,
/// projected to the grid with the same master-draw quadrature the averaged
/// operator uses.
pub fn restricted_one_step_density(
    scenario: &Scenario,
    id: WellId,
    epsilon: f64,
    exponent_q: f64,
    grid: Grid,
    x: f64,
    nodes_per_stratum: usize,
) -> Result<GridFunction, MapError> {
    let mut values = vec![0.0; grid.n()];
    let h = grid.h();
    for (sigma, weight) in sigma_nodes(epsilon, exponent_q, nodes_per_stratum) {
        let step = scenario.restricted_step(id, x, sigma)?;
        values[grid.cell_of(step.value)] += weight / h;
    }
    Ok(GridFunction::new(grid, values))
}

/// Smallest `n ≥ 1` such that every start cell in the well has
/// `d_TV(n-step density, stationary) ≤ ς`, where the 1-step density from a
/// cell is the restricted landing density of its midpoint. Returns 0 when
/// `ς ≥ 1` or the well selects no cells.
#[allow(clippy::too_many_arguments)]
pub fn estimate_n_mix(
    scenario: &Scenario,
    id: WellId,
    epsilon: f64,
    exponent_q: f64,
    op: &UlamOperator,
    well: &IntervalUnion,
    varsigma: f64,
    nodes_per_stratum: usize,
) -> Result<usize, UlamError> {
    assert!(varsigma > 0.0 && varsigma <= 1.0);
    if varsigma >= 1.0 {
        return Ok(0);
    }
    let grid = op.grid;
    let h = grid.h();
    let stationary = stationary_density(op, 1e-12)?;
    let starts = grid.cells_with_midpoint_in(well);
    if starts.is_empty() {
        return Ok(0);
    }
    let mut currents: Vec<Vec<f64>> = starts
        .iter()
        .map(|&k| {
            restricted_one_step_density(
                scenario,
                id,
                epsilon,
                exponent_q,
                grid,
                grid.midpoint(k),
                nodes_per_stratum,
            )
            .map(|f| f.values().to_vec())
        })
        .collect::<Result<_, _>>()?;
    for n in 1..=MIX_STEP_BUDGET {
        let worst = currents
            .iter()
            .map(|cur| {
                cur.iter()
                    .zip(stationary.values())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    * h
                    * 0.5
            })
            .fold(0.0, f64::max);
        if worst <= varsigma {
            return Ok(n);
        }
        for cur in &mut currents {
            *cur = op.apply_left(cur);
        }
    }
    Err(UlamError::Budget {
        cap: MIX_STEP_BUDGET,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn max_row_sum_error(op: &UlamOperator) -> f64 {
        op.row_sums()
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn deterministic_rows_are_stochastic() {
        let map = scenarios::two_well(0.05).map;
        let op = build_deterministic(&map, WellId(1), 256).unwrap();
        assert!(max_row_sum_error(&op) < 1e-12);
        assert_eq!(op.kind(), OperatorKind::Deterministic);
    }

    #[test]
    fn doubling_rows_split_dyadically() {
        let map = scenarios::doubling();
        let op = build_deterministic(&map, WellId(1), 64).unwrap();
        // slope 2 on a dyadic grid: every cell sends exactly 1/2 to each of
        // two cells
        for row in op.rows() {
            assert_eq!(row.len(), 2);
            for &(_, v) in row {
                assert_abs_diff_eq!(v, 0.5, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn deterministic_row_matches_monte_carlo() {
        let map = scenarios::two_well(0.05).map;
        let op = build_deterministic(&map, WellId(1), 256).unwrap();
        let grid = op.grid();
        let k = 10;
        let cell = grid.cell(k);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = 100_000;
        let mut counts = vec![0usize; grid.n()];
        for _ in 0..samples {
            let x = cell.lo + rng.random::<f64>() * cell.len();
            counts[grid.cell_of(map.eval(x).unwrap())] += 1;
        }
        for (l, &c) in counts.iter().enumerate() {
            let empirical = c as f64 / samples as f64;
            let exact = op.rows()[k]
                .iter()
                .find(|&&(col, _)| col == l)
                .map_or(0.0, |&(_, v)| v);
            assert!(
                (empirical - exact).abs() < 5e-3,
                "cell {l}: empirical {empirical} vs exact {exact}"
            );
        }
    }

    #[test]
    fn deterministic_spectrum_two_well() {
        let map = scenarios::two_well(0.05).map;
        let op = build_deterministic(&map, WellId(1), 512).unwrap();
        let p = stationary_density(&op, 1e-13).unwrap();
        let residual: f64 = op
            .apply_left(p.values())
            .iter()
            .zip(p.values())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * op.grid().h();
        assert!(residual < 1e-10, "leading-pair residual {residual}");
        let est = second_eigenvalue(&op).unwrap();
        assert!(est.leading_residual < 1e-10);
        assert!(est.modulus < 0.9, "second modulus {}", est.modulus);
        assert!(!est.degenerate);
    }

    #[test]
    fn doubling_nonleading_spectrum_collapses() {
        // on a dyadic grid the slope-2 matrix satisfies M^log2(n) = uniform,
        // so every non-leading eigenvalue is exactly 0; numerically the
        // defective Jordan chains smear it to ~eps_mach^(1/chain)
        let map = scenarios::doubling();
        let op = build_deterministic(&map, WellId(1), 1024).unwrap();
        let est = second_eigenvalue(&op).unwrap();
        assert!(est.leading_residual < 1e-10);
        assert!(est.modulus < 0.1, "second modulus {}", est.modulus);
    }

    /// Rank-2 chain: every cell jumps to cell 0 (w.p. 0.9) or cell n/2
    /// (w.p. 0.1) from the first half, mirrored from the second; the
    /// reduced two-state matrix [[0.9, 0.1], [0.1, 0.9]] gives exact
    /// eigenvalues {1, 0.8, 0, …}.
    fn block_chain(n: usize) -> UlamOperator {
        let grid = Grid::new(Interval::new(0.0, 1.0), n);
        let rows = (0..n)
            .map(|k| {
                if k < n / 2 {
                    vec![(0usize, 0.9), (n / 2, 0.1)]
                } else {
                    vec![(0usize, 0.1), (n / 2, 0.9)]
                }
            })
            .collect();
        UlamOperator::from_rows(grid, OperatorKind::Deterministic, rows).unwrap()
    }

    #[test]
    fn block_chain_second_eigenvalue_exact_dense() {
        let est = second_eigenvalue(&block_chain(64)).unwrap();
        assert_abs_diff_eq!(est.modulus, 0.8, epsilon = 1e-10);
        assert!(!est.degenerate);
    }

    #[test]
    fn block_chain_second_eigenvalue_deflated_power() {
        // 4096 cells exceeds the dense cutoff, exercising the deflated
        // power-iteration path
        let est = second_eigenvalue(&block_chain(4096)).unwrap();
        assert_abs_diff_eq!(est.modulus, 0.8, epsilon = 1e-6);
    }

    #[test]
    fn identity_operator_is_flagged_degenerate() {
        let grid = Grid::new(Interval::new(0.0, 1.0), 64);
        let rows = (0..64).map(|k| vec![(k, 1.0)]).collect();
        let op = UlamOperator::from_rows(grid, OperatorKind::Deterministic, rows).unwrap();
        let est = second_eigenvalue(&op).unwrap();
        assert!(est.degenerate);
        assert_abs_diff_eq!(est.modulus, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_cell_is_rejected() {
        use crate::maps::{Branch, Component, PiecewiseLinearMap};
        // one branch of width 0.005 < h = 1/64: the grid cannot resolve it
        let iv = Interval::new(0.0, 1.0);
        let branches = vec![
            Branch::through(0.0, 0.0, 0.005, 1.0),
            Branch::through(0.005, 1.0, 1.0, 0.0),
        ];
        let map =
            PiecewiseLinearMap::new(iv, vec![Component::new(WellId(1), iv, branches)]).unwrap();
        let err = build_deterministic(&map, WellId(1), 64);
        assert!(matches!(err, Err(UlamError::DegenerateCell { .. })));
        // while two_well branches (width 1/8) resolve fine at 64 cells
        let ok = build_deterministic(&scenarios::two_well(0.05).map, WellId(1), 64);
        assert!(ok.is_ok());
    }

    #[test]
    fn perturbed_rows_are_stochastic_and_symmetric() {
        let s = scenarios::two_well(0.12);
        let kernel = s.kernel(0.1, 3.0).unwrap();
        let op = build_perturbed(&kernel, 256, 32).unwrap();
        assert!(max_row_sum_error(&op) < 1e-10);
        assert_eq!(op.kind(), OperatorKind::Perturbed);
        let p = stationary_density(&op, 1e-11).unwrap();
        let left = p.integral_over(&IntervalUnion::singleton(Interval::new(0.0, 0.5)));
        assert_abs_diff_eq!(left, 0.5, epsilon = 2e-3);
    }

    #[test]
    fn unconfined_kernel_is_rejected() {
        let s = scenarios::two_well(0.05);
        let kernel = s.kernel(0.1, 3.0).unwrap();
        let err = build_perturbed(&kernel, 256, 32);
        assert!(matches!(err, Err(UlamError::Unconfined(_))));
    }

    #[test]
    fn spectral_gap_closes_as_epsilon_shrinks() {
        let s = scenarios::two_well(0.12);
        let mut last = 0.0;
        for eps in [0.1, 0.05] {
            let op = build_perturbed(&s.kernel(eps, 3.0).unwrap(), 256, 32).unwrap();
            let est = second_eigenvalue(&op).unwrap();
            assert!(est.modulus < 1.0);
            assert!(
                est.modulus > last,
                "second modulus not increasing: {} after {}",
                est.modulus,
                last
            );
            last = est.modulus;
        }
    }

    #[test]
    fn restricted_rows_are_stochastic() {
        let s = scenarios::two_well(0.05);
        let op = build_restricted(&s, WellId(1), 0.05, 3.0, 256, 16).unwrap();
        assert!(max_row_sum_error(&op) < 1e-10);
        assert_eq!(op.kind(), OperatorKind::Restricted(WellId(1)));
        // unique stationary density, strictly positive mass everywhere
        let p = stationary_density(&op, 1e-12).unwrap();
        assert_abs_diff_eq!(p.integral(), 1.0, epsilon = 1e-10);
        assert!(p.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn stationary_bv_norm_obeys_contraction_bound() {
        // contraction 2/s = 5/9 and offset 2/ℓ = 2/0.45 give the fixed-point
        // bound (2/ℓ)/(1 − 2/s) = 10 for b = 0.05
        let s = scenarios::two_well(0.05);
        let op = build_perturbed(&s.kernel(0.04, 3.0).unwrap(), 512, 32).unwrap();
        let p = stationary_density(&op, 1e-11).unwrap();
        assert!(bv_norm(&p) <= 10.0 + 0.5, "BV norm {}", bv_norm(&p));
    }

    #[test]
    fn ly_sweep_reports_no_violations() {
        let s = scenarios::two_well(0.05);
        let report = ly_check(&s, WellId(1), 0.05, 3.0, 256, 3.6, 0.45, 20, 10, 11).unwrap();
        assert_eq!(report.violations, 0);
        assert!(report.worst_margin >= 0.0);
    }

    #[test]
    fn operator_distance_identical_is_zero() {
        let map = scenarios::two_well(0.05).map;
        let op = build_deterministic(&map, WellId(1), 128).unwrap();
        let d = operator_distance(&op, &op, 10, 3).unwrap();
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn operator_distance_scales_with_epsilon() {
        let s = scenarios::two_well(0.12);
        let det = build_deterministic(&s.map, WellId(1), 256).unwrap();
        let mut last = f64::INFINITY;
        for eps in [0.1, 0.05, 0.02] {
            let rest = build_restricted(&s, WellId(1), eps, 3.0, 256, 16).unwrap();
            let d = operator_distance(&det, &rest, 40, 5).unwrap();
            let bound = closeness_bound_two_well(0.12, eps, 3.0);
            assert!(d < last, "distance did not shrink: {d} after {last}");
            assert!(d <= bound, "estimate {d} exceeds analytic bound {bound}");
            last = d;
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let map = scenarios::two_well(0.05).map;
        let a = build_deterministic(&map, WellId(1), 128).unwrap();
        let b = build_deterministic(&map, WellId(1), 256).unwrap();
        assert!(matches!(
            operator_distance(&a, &b, 1, 0),
            Err(UlamError::GridMismatch)
        ));
    }

    #[test]
    fn n_step_density_conserves_and_converges() {
        let s = scenarios::two_well(0.05);
        let op = build_restricted(&s, WellId(1), 0.05, 3.0, 128, 16).unwrap();
        let init = GridFunction::uniform_density(op.grid());
        let one = n_step_density(&op, &init, 1);
        assert_eq!(one.values(), init.values());
        let far = n_step_density(&op, &init, 200);
        assert_abs_diff_eq!(far.integral(), 1.0, epsilon = 1e-10);
        let stat = stationary_density(&op, 1e-12).unwrap();
        let dist: f64 = far
            .values()
            .iter()
            .zip(stat.values())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * op.grid().h();
        assert!(dist < 1e-8, "L1 distance to stationary {dist}");
    }

    #[test]
    fn mixing_time_is_epsilon_uniform() {
        let s = scenarios::two_well(0.12);
        let well = IntervalUnion::singleton(Interval::new(0.05, 0.45));
        let mut times = Vec::new();
        for eps in [0.1, 0.05, 0.02] {
            let op = build_restricted(&s, WellId(1), eps, 3.0, 128, 16).unwrap();
            let n = estimate_n_mix(&s, WellId(1), eps, 3.0, &op, &well, 0.1, 16).unwrap();
            assert!(n >= 1);
            times.push(n as i64);
        }
        let spread = times.iter().max().unwrap() - times.iter().min().unwrap();
        assert!(spread <= 2, "mixing times {times:?} spread {spread}");
    }

    #[test]
    fn duality_of_pushforward_and_pullback() {
        // ⟨G∘T̃_ω, F⟩ against ⟨G, P̃_ω F⟩ with the cell-center pushforward:
        // the mismatch is at most Lip(G)·(s+2)h per unit of |F| mass
        let s = scenarios::two_well(0.05);
        let sigma = 0.0007;
        let restricted = s.restricted(WellId(1), sigma).unwrap();
        let n = 512;
        let grid = Grid::new(Interval::new(0.0, 0.5), n);
        let rows = deterministic_rows(&restricted, WellId(1), grid).unwrap();
        let g = GridFunction::from_fn(grid, |y| (2.0 * std::f64::consts::PI * y).sin());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let h = grid.h();
        let lhs: f64 = (0..n)
            .map(|k| {
                let image = restricted.eval(grid.midpoint(k)).unwrap();
                g.values()[grid.cell_of(image)] * f[k]
            })
            .sum::<f64>()
            * h;
        let mut pushed = vec![0.0; n];
        for (k, row) in rows.iter().enumerate() {
            for &(l, v) in row {
                pushed[l] += f[k] * v;
            }
        }
        let rhs: f64 = pushed.iter().zip(g.values()).map(|(a, b)| a * b).sum::<f64>() * h;
        let l1_f: f64 = f.iter().map(|v| v.abs()).sum::<f64>() * h;
        let lip = 2.0 * std::f64::consts::PI;
        let tolerance = lip * (3.6 + 2.0) * h * l1_f + 1e-12;
        assert!(
            (lhs - rhs).abs() <= tolerance,
            "duality gap {} over tolerance {tolerance}",
            (lhs - rhs).abs()
        );
    }

    #[test]
    fn per_sigma_norms_dominate_averaged_norm() {
        let s = scenarios::two_well(0.05);
        let (eps, q) = (0.05, 3.0);
        let n = 128;
        let grid = Grid::new(Interval::new(0.0, 0.5), n);
        let nodes = sigma_nodes(eps, q, 8);
        let per_node: Vec<_> = nodes
            .iter()
            .map(|&(sigma, _)| {
                deterministic_rows(&s.restricted(WellId(1), sigma).unwrap(), WellId(1), grid)
                    .unwrap()
            })
            .collect();
        let averaged = build_restricted(&s, WellId(1), eps, q, n, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let f: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let avg_of_norms: f64 = per_node
                .iter()
                .zip(&nodes)
                .map(|(rows, &(_, w))| {
                    let mut pushed = vec![0.0; n];
                    for (k, row) in rows.iter().enumerate() {
                        for &(l, v) in row {
                            pushed[l] += f[k] * v;
                        }
                    }
                    w * bv_norm(&GridFunction::new(grid, pushed))
                })
                .sum();
            let norm_of_avg = bv_norm(&GridFunction::new(grid, averaged.apply_left(&f)));
            assert!(avg_of_norms >= norm_of_avg - 1e-12);
        }
    }

    #[test]
    fn refinement_improves_stationary_density() {
        let s = scenarios::two_well(0.12);
        let kernel = s.kernel(0.1, 3.0).unwrap();
        let mut dists = Vec::new();
        let sizes = [128usize, 256, 512];
        for &n in &sizes {
            let coarse = stationary_density(&build_perturbed(&kernel, n, 32).unwrap(), 1e-11).unwrap();
            let fine =
                stationary_density(&build_perturbed(&kernel, 2 * n, 32).unwrap(), 1e-11).unwrap();
            let fine_grid = fine.grid();
            let resampled = GridFunction::from_fn(fine_grid, |x| coarse.eval(x));
            let dist: f64 = resampled
                .values()
                .iter()
                .zip(fine.values())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                * fine_grid.h();
            dists.push(dist);
        }
        // log-log slope of the refinement error against n
        let slope = {
            let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
            let ys: Vec<f64> = dists.iter().map(|d| d.ln()).collect();
            let mx = xs.iter().sum::<f64>() / xs.len() as f64;
            let my = ys.iter().sum::<f64>() / ys.len() as f64;
            let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
            cov / var
        };
        assert!(slope <= -0.8, "refinement slope {slope} too shallow: {dists:?}");
    }

    proptest! {
        /// The sup norm of a grid function never exceeds
        /// `max(1, 1/Leb) · ‖·‖_BV` (discrete embedding, exact).
        #[test]
        fn sup_norm_embedding(
            values in proptest::collection::vec(-10.0..10.0f64, 8..64),
            len in 0.1..2.0f64,
        ) {
            let n = values.len();
            let grid = Grid::new(Interval::new(0.0, len), n);
            let f = GridFunction::new(grid, values);
            let sup = f.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let cap = 1.0f64.max(1.0 / len) * bv_norm(&f);
            prop_assert!(sup <= cap + 1e-12);
        }

        /// Row-stochasticity of restricted builds across the feasible noise
        /// range.
        #[test]
        fn restricted_builds_stay_stochastic(eps in 0.005..0.045f64) {
            let s = scenarios::two_well(0.05);
            let op = build_restricted(&s, WellId(1), eps, 3.0, 64, 4).unwrap();
            prop_assert!(max_row_sum_error(&op) < 1e-10);
        }
    }
}
