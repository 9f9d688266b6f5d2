//! Resolvent solves for the sped-up jump process and its potential theory.
//!
//! The chain on the grid has generator `L = β(R − I)`, with `R` the
//! row-stochastic cell-transition matrix and `β` the clock rate. This
//! module solves `(λ − L)F = G` directly, measures how close `F` is to
//! being constant on each well (oscillation), averages it into the
//! reduced well vector `f_ε`, and solves the matching κ-state reduced
//! problem. The potential-theory layer provides the time-reversed chain,
//! equilibrium potentials, capacities, Dirichlet forms, and grid-exact
//! well-to-well rates via absorbed-chain solves, together with the
//! identities that tie them to one another.
//!
//! Conventions: a cell belongs to a well or hole when its midpoint does
//! (the center rule); cells whose stationary mass is below [`ZERO_MASS`]
//! are excluded from potential-theory state sets.

use crate::grid::{Grid, GridFunction};
use crate::linalg::SparseSolver;
use crate::maps::WellId;
use crate::ulam::{OperatorKind, UlamOperator};
use crate::wells::WellStructure;
use thiserror::Error;

/// Stationary mass below which a cell is excluded from potential-theory
/// state sets.
pub const ZERO_MASS: f64 = 1e-14;

/// Accepted sup-norm residual of the direct sparse solves.
const SOLVE_RESIDUAL: f64 = 1e-8;

/// Allowed numerical excursion of a probability outside `[0, 1]`.
const PROBABILITY_EXCURSION: f64 = 1e-8;

/// Allowed deviation of the reversed rows from stochasticity before the
/// supplied density is rejected as non-stationary.
const ADJOINT_ROW_TOL: f64 = 1e-8;

/// Mass flowing from kept cells into an excluded cell above this bound
/// contradicts the exclusion and is reported as an error.
const EXCLUDED_INFLOW: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ResolventError {
    #[error("resolvent parameter must be positive, got {lambda}")]
    NonPositiveLambda { lambda: f64 },
    #[error("expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("operator and density live on different grids")]
    GridMismatch,
    #[error("row sums of the generator deviate by {defect}")]
    NotAGenerator { defect: f64 },
    #[error("rate ({i}, {j}) = {value} is not a valid off-diagonal rate")]
    InvalidRate { i: usize, j: usize, value: f64 },
    #[error("cell set is empty")]
    EmptySet,
    #[error("cell sets overlap")]
    OverlappingSets,
    #[error("cells {cells:?} have no stationary mass but receive flow")]
    ZeroMassCell { cells: Vec<usize> },
    #[error("density is not stationary: reversed row {cell} sums off by {defect}")]
    NotStationary { cell: usize, defect: f64 },
    #[error("well {0} carries no stationary mass")]
    MasslessWell(usize),
    #[error("interior cells cannot reach the boundary sets")]
    Disconnected,
    #[error("linear-algebra backend: {0}")]
    Backend(String),
}

/// The generator `L = β(R − I)` of the sped-up chain on a grid.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    op: UlamOperator,
    beta: f64,
}

impl GeneratorMatrix {
    /// Wraps a transition matrix and clock rate; the row sums of `L` must
    /// vanish to within `1e-10`.
    pub fn new(op: UlamOperator, beta: f64) -> Result<Self, ResolventError> {
        assert!(beta > 0.0 && beta.is_finite(), "clock rate must be positive");
        let defect = op
            .row_sums()
            .iter()
            .map(|s| beta * (s - 1.0).abs())
            .fold(0.0f64, f64::max);
        if defect > 1e-10 {
            return Err(ResolventError::NotAGenerator { defect });
        }
        Ok(Self { op, beta })
    }

    pub fn operator(&self) -> &UlamOperator {
        &self.op
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn grid(&self) -> Grid {
        self.op.grid()
    }

    /// `L f = β(R f − f)` on raw cell values (action on observables).
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.op
            .apply_right(f)
            .into_iter()
            .zip(f)
            .map(|(rf, &v)| self.beta * (rf - v))
            .collect()
    }
}

/// Solution of `(λ − L)F = G` with the well summaries attached.
#[derive(Debug, Clone)]
pub struct ResolventSolution {
    pub lambda: f64,
    /// The reduced right-hand side, one entry per well.
    pub g: Vec<f64>,
    /// `g` lifted to the grid: `g(i)` on well `i`, zero on the holes.
    pub rhs: GridFunction,
    /// The grid solution `F`.
    pub f: GridFunction,
    /// Per-well `sup − inf` of `F` over cells with stationary mass.
    pub oscillation: Vec<f64>,
    /// Per-well stationary averages `∫ F p / μ(E_i)`.
    pub f_eps: Vec<f64>,
    /// Sup-norm residual of the linear solve.
    pub residual: f64,
}

/// Cells of each well and of the hole set under the center rule.
struct CellSets {
    per_well: Vec<Vec<usize>>,
    hole: Vec<usize>,
    /// `Some(i)` when the cell's midpoint lies in well `i+1`.
    label: Vec<Option<usize>>,
}

fn classify_cells(grid: Grid, wells: &WellStructure) -> CellSets {
    let kappa = wells.kappa();
    let mut per_well = vec![Vec::new(); kappa];
    let mut hole = Vec::new();
    let mut label = vec![None; grid.n()];
    for k in 0..grid.n() {
        let x = grid.midpoint(k);
        match (1..=kappa).find(|&i| wells.well(WellId(i)).contains_closed(x)) {
            Some(i) => {
                per_well[i - 1].push(k);
                label[k] = Some(i - 1);
            }
            None => hole.push(k),
        }
    }
    CellSets {
        per_well,
        hole,
        label,
    }
}

/// Solves `(λ − L)x = rhs` by direct sparse factorization, returning the
/// solution and its sup-norm residual.
fn resolvent_apply(
    gen: &GeneratorMatrix,
    lambda: f64,
    rhs: &[f64],
) -> Result<(Vec<f64>, f64), ResolventError> {
    let n = gen.op.n_cells();
    assert_eq!(rhs.len(), n);
    let beta = gen.beta;
    let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(n * 4);
    for (k, row) in gen.op.rows().iter().enumerate() {
        let mut diag = lambda + beta;
        for &(l, v) in row {
            if l == k {
                diag -= beta * v;
            } else {
                trip.push((k, l, -beta * v));
            }
        }
        trip.push((k, k, diag));
    }
    let solver = SparseSolver::new(n, &trip).map_err(ResolventError::Backend)?;
    let x = solver.solve(rhs);
    let rx = gen.op.apply_right(&x);
    let residual = (0..n)
        .map(|k| ((lambda + beta) * x[k] - beta * rx[k] - rhs[k]).abs())
        .fold(0.0f64, f64::max);
    let scale = 1.0 + rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !residual.is_finite() || residual > SOLVE_RESIDUAL * scale {
        return Err(ResolventError::Backend(format!(
            "resolvent solve residual {residual}"
        )));
    }
    Ok((x, residual))
}

/// Solves the resolvent equation with `G` the center-rule lift of the
/// reduced vector `g`, and summarizes the solution over the wells using
/// the stationary density.
pub fn solve_resolvent(
    gen: &GeneratorMatrix,
    lambda: f64,
    g: &[f64],
    wells: &WellStructure,
    stationary: &GridFunction,
) -> Result<ResolventSolution, ResolventError> {
    if !(lambda > 0.0) {
        return Err(ResolventError::NonPositiveLambda { lambda });
    }
    let kappa = wells.kappa();
    if g.len() != kappa {
        return Err(ResolventError::DimensionMismatch {
            expected: kappa,
            got: g.len(),
        });
    }
    let grid = gen.grid();
    if stationary.grid() != grid {
        return Err(ResolventError::GridMismatch);
    }

    let cells = classify_cells(grid, wells);
    let rhs: Vec<f64> = cells
        .label
        .iter()
        .map(|lab| lab.map_or(0.0, |i| g[i]))
        .collect();
    let (x, residual) = resolvent_apply(gen, lambda, &rhs)?;

    let h = grid.h();
    let mut oscillation = vec![0.0; kappa];
    let mut f_eps = vec![0.0; kappa];
    for i in 0..kappa {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut num, mut mass) = (0.0, 0.0);
        for &k in &cells.per_well[i] {
            let m = stationary.values()[k] * h;
            if m < ZERO_MASS {
                continue;
            }
            lo = lo.min(x[k]);
            hi = hi.max(x[k]);
            num += x[k] * m;
            mass += m;
        }
        oscillation[i] = if hi >= lo { hi - lo } else { 0.0 };
        f_eps[i] = if mass > 0.0 { num / mass } else { 0.0 };
    }

    Ok(ResolventSolution {
        lambda,
        g: g.to_vec(),
        rhs: GridFunction::new(grid, rhs),
        f: GridFunction::new(grid, x),
        oscillation,
        f_eps,
        residual,
    })
}

/// The expected discounted time the chain spends in the holes, as a grid
/// function: the resolvent applied to the hole indicator.
pub fn hole_occupation(
    gen: &GeneratorMatrix,
    lambda: f64,
    wells: &WellStructure,
) -> Result<GridFunction, ResolventError> {
    if !(lambda > 0.0) {
        return Err(ResolventError::NonPositiveLambda { lambda });
    }
    let grid = gen.grid();
    let cells = classify_cells(grid, wells);
    let mut rhs = vec![0.0; grid.n()];
    for &k in &cells.hole {
        rhs[k] = 1.0;
    }
    let (x, _) = resolvent_apply(gen, lambda, &rhs)?;
    Ok(GridFunction::new(grid, x))
}

/// The κ-state generator `(𝓛f)(i) = Σ_j θ(i,j)[f(j) − f(i)]`.
#[derive(Debug, Clone)]
pub struct ReducedGenerator {
    theta: Vec<Vec<f64>>,
}

impl ReducedGenerator {
    /// Validates a square rate matrix: zero diagonal, finite nonnegative
    /// off-diagonal entries.
    pub fn new(theta: Vec<Vec<f64>>) -> Result<Self, ResolventError> {
        let kappa = theta.len();
        for (i, row) in theta.iter().enumerate() {
            if row.len() != kappa {
                return Err(ResolventError::DimensionMismatch {
                    expected: kappa,
                    got: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                let bad = if i == j { v != 0.0 } else { !(v >= 0.0) || !v.is_finite() };
                if bad {
                    return Err(ResolventError::InvalidRate { i, j, value: v });
                }
            }
        }
        Ok(Self { theta })
    }

    pub fn kappa(&self) -> usize {
        self.theta.len()
    }

    pub fn rates(&self) -> &[Vec<f64>] {
        &self.theta
    }

    pub fn rate(&self, i: WellId, j: WellId) -> f64 {
        self.theta[i.idx()][j.idx()]
    }

    /// `(𝓛f)(i) = Σ_j θ(i,j)[f(j) − f(i)]`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.kappa());
        self.theta
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, &t)| t * (f[j] - f[i]))
                    .sum()
            })
            .collect()
    }

    /// Whether every well communicates with every other through chains of
    /// positive rates.
    pub fn is_irreducible(&self) -> bool {
        let k = self.kappa();
        if k <= 1 {
            return true;
        }
        let mut reach = vec![vec![false; k]; k];
        for i in 0..k {
            reach[i][i] = true;
            for j in 0..k {
                if self.theta[i][j] > 0.0 {
                    reach[i][j] = true;
                }
            }
        }
        for m in 0..k {
            for i in 0..k {
                for j in 0..k {
                    reach[i][j] = reach[i][j] || (reach[i][m] && reach[m][j]);
                }
            }
        }
        reach.iter().all(|row| row.iter().all(|&r| r))
    }
}

/// Solves the κ-state problem `(λ − 𝓛)f = g`.
pub fn solve_reduced(
    reduced: &ReducedGenerator,
    lambda: f64,
    g: &[f64],
) -> Result<Vec<f64>, ResolventError> {
    if !(lambda > 0.0) {
        return Err(ResolventError::NonPositiveLambda { lambda });
    }
    let kappa = reduced.kappa();
    if g.len() != kappa {
        return Err(ResolventError::DimensionMismatch {
            expected: kappa,
            got: g.len(),
        });
    }
    let mut trip = Vec::with_capacity(kappa * kappa);
    for i in 0..kappa {
        let total: f64 = reduced.theta[i].iter().sum();
        trip.push((i, i, lambda + total));
        for j in 0..kappa {
            if j != i && reduced.theta[i][j] > 0.0 {
                trip.push((i, j, -reduced.theta[i][j]));
            }
        }
    }
    let solver = SparseSolver::new(kappa, &trip).map_err(ResolventError::Backend)?;
    Ok(solver.solve(g))
}

/// Comparison of the well averages of a grid solve against the reduced
/// solution with the same data.
#[derive(Debug, Clone)]
pub struct R2Report {
    pub f_eps: Vec<f64>,
    pub f_reduced: Vec<f64>,
    pub diffs: Vec<f64>,
    pub max_diff: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Solves the reduced problem with the solution's `(λ, g)` and reports
/// `|f_ε(i) − f(i)|` per well against `tol`.
pub fn check_r2(
    solution: &ResolventSolution,
    reduced: &ReducedGenerator,
    tol: f64,
) -> Result<R2Report, ResolventError> {
    if reduced.kappa() != solution.g.len() {
        return Err(ResolventError::DimensionMismatch {
            expected: solution.g.len(),
            got: reduced.kappa(),
        });
    }
    let f_reduced = solve_reduced(reduced, solution.lambda, &solution.g)?;
    let diffs: Vec<f64> = solution
        .f_eps
        .iter()
        .zip(&f_reduced)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let max_diff = diffs.iter().fold(0.0f64, |a, &d| a.max(d));
    Ok(R2Report {
        f_eps: solution.f_eps.clone(),
        f_reduced,
        diffs,
        max_diff,
        tol,
        pass: max_diff <= tol,
    })
}

fn cell_masses(op: &UlamOperator, stationary: &GridFunction) -> Result<Vec<f64>, ResolventError> {
    if stationary.grid() != op.grid() {
        return Err(ResolventError::GridMismatch);
    }
    let h = op.grid().h();
    Ok(stationary.values().iter().map(|p| p * h).collect())
}

/// The time reversal of `op` with respect to its stationary density:
/// `R†[l][k] = μ[k] R[k][l] / μ[l]` over cells with stationary mass.
/// Massless cells become isolated self-loops; if they receive flow from
/// the kept cells, or if a reversed row strays from stochasticity, the
/// supplied density cannot be stationary and an error is returned.
pub fn adjoint_kernel(
    op: &UlamOperator,
    stationary: &GridFunction,
) -> Result<UlamOperator, ResolventError> {
    let n = op.n_cells();
    let mass = cell_masses(op, stationary)?;
    let kept: Vec<bool> = mass.iter().map(|&m| m >= ZERO_MASS).collect();

    let mut incoming = vec![0.0; n];
    for (k, row) in op.rows().iter().enumerate() {
        if !kept[k] {
            continue;
        }
        for &(l, v) in row {
            if !kept[l] {
                incoming[l] += mass[k] * v;
            }
        }
    }
    let offenders: Vec<usize> = (0..n)
        .filter(|&l| !kept[l] && incoming[l] > EXCLUDED_INFLOW)
        .collect();
    if !offenders.is_empty() {
        return Err(ResolventError::ZeroMassCell { cells: offenders });
    }

    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (k, row) in op.rows().iter().enumerate() {
        if !kept[k] {
            continue;
        }
        for &(l, v) in row {
            if kept[l] && v > 0.0 {
                cols[l].push((k, mass[k] * v / mass[l]));
            }
        }
    }
    let mut rows_out = Vec::with_capacity(n);
    for (l, col) in cols.into_iter().enumerate() {
        if !kept[l] {
            rows_out.push(vec![(l, 1.0)]);
            continue;
        }
        let sum: f64 = col.iter().map(|&(_, v)| v).sum();
        let defect = (sum - 1.0).abs();
        if defect > ADJOINT_ROW_TOL {
            return Err(ResolventError::NotStationary { cell: l, defect });
        }
        rows_out.push(col.into_iter().map(|(k, v)| (k, v / sum)).collect());
    }
    UlamOperator::from_rows(op.grid(), OperatorKind::Adjoint, rows_out)
        .map_err(|e| ResolventError::Backend(e.to_string()))
}

fn validate_sets(
    n: usize,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<bool>, Vec<bool>), ResolventError> {
    if a.is_empty() || b.is_empty() {
        return Err(ResolventError::EmptySet);
    }
    let mut a_mask = vec![false; n];
    let mut b_mask = vec![false; n];
    for &k in a {
        assert!(k < n, "cell index out of range");
        a_mask[k] = true;
    }
    for &k in b {
        assert!(k < n, "cell index out of range");
        if a_mask[k] {
            return Err(ResolventError::OverlappingSets);
        }
        b_mask[k] = true;
    }
    Ok((a_mask, b_mask))
}

/// Hitting probability of `target` before the other absorbing cells:
/// solves `(I − R_II) u = R·1_target` over the given interior cells.
/// Returns `u` aligned with `interior`.
fn harmonic_extension(
    op: &UlamOperator,
    interior: &[usize],
    target: &[bool],
) -> Result<Vec<f64>, ResolventError> {
    if interior.is_empty() {
        return Ok(Vec::new());
    }
    let n = op.n_cells();
    let mut pos = vec![None; n];
    for (ik, &k) in interior.iter().enumerate() {
        pos[k] = Some(ik);
    }
    let m = interior.len();
    let mut trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut rhs = vec![0.0; m];
    for (ik, &k) in interior.iter().enumerate() {
        let mut diag = 1.0;
        for &(l, v) in &op.rows()[k] {
            if l == k {
                diag -= v;
            } else if let Some(il) = pos[l] {
                trip.push((ik, il, -v));
            } else if target[l] {
                rhs[ik] += v;
            }
        }
        trip.push((ik, ik, diag));
    }
    let solver = SparseSolver::new(m, &trip).map_err(|_| ResolventError::Disconnected)?;
    let u = solver.solve(&rhs);

    let mut residual = 0.0f64;
    for (ik, &k) in interior.iter().enumerate() {
        let mut r = u[ik] - rhs[ik];
        for &(l, v) in &op.rows()[k] {
            if let Some(il) = pos[l] {
                r -= v * u[il];
            }
        }
        residual = residual.max(r.abs());
    }
    if !residual.is_finite() || residual > SOLVE_RESIDUAL {
        return Err(ResolventError::Disconnected);
    }
    let excursion = u
        .iter()
        .map(|&v| (-v).max(v - 1.0).max(0.0))
        .fold(0.0f64, f64::max);
    if excursion > PROBABILITY_EXCURSION {
        return Err(ResolventError::Backend(format!(
            "hitting probability leaves [0, 1] by {excursion}"
        )));
    }
    Ok(u.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// The equilibrium potential between the cell sets `A` and `B`: one on
/// `A`, zero on `B`, harmonic for `op` on the remaining cells with
/// stationary mass. Massless cells outside `A` take the value zero.
pub fn equilibrium_potential(
    op: &UlamOperator,
    stationary: &GridFunction,
    a: &[usize],
    b: &[usize],
) -> Result<GridFunction, ResolventError> {
    let n = op.n_cells();
    let mass = cell_masses(op, stationary)?;
    let (a_mask, b_mask) = validate_sets(n, a, b)?;
    let interior: Vec<usize> = (0..n)
        .filter(|&k| mass[k] >= ZERO_MASS && !a_mask[k] && !b_mask[k])
        .collect();
    let u = harmonic_extension(op, &interior, &a_mask)?;
    let mut values = vec![0.0; n];
    for &k in a {
        values[k] = 1.0;
    }
    for (ik, &k) in interior.iter().enumerate() {
        values[k] = u[ik];
    }
    Ok(GridFunction::new(op.grid(), values))
}

/// The capacity between the cell sets `A` and `B`: the stationary flow
/// out of `A` that reaches `B` before returning, at clock rate `beta`.
pub fn capacity(
    op: &UlamOperator,
    stationary: &GridFunction,
    beta: f64,
    a: &[usize],
    b: &[usize],
) -> Result<f64, ResolventError> {
    assert!(beta > 0.0, "clock rate must be positive");
    let pot = equilibrium_potential(op, stationary, a, b)?;
    let mass = cell_masses(op, stationary)?;
    let hv = pot.values();
    let mut cap = 0.0;
    for &k in a {
        if mass[k] < ZERO_MASS {
            continue;
        }
        let escape: f64 = op.rows()[k].iter().map(|&(l, v)| v * (1.0 - hv[l])).sum();
        cap += mass[k] * escape;
    }
    Ok(beta * cap)
}

/// The Dirichlet form `D(F) = (β/2) Σ_{k,l} μ[k] R[k][l] (F[k] − F[l])²`.
/// Requires the stationary density of `op`; the quadratic-form identity
/// `D(F) = ⟨F, −L F⟩_μ` is asserted.
pub fn dirichlet_form(
    op: &UlamOperator,
    stationary: &GridFunction,
    beta: f64,
    f: &GridFunction,
) -> f64 {
    assert!(beta > 0.0, "clock rate must be positive");
    assert_eq!(f.grid(), op.grid(), "grid mismatch");
    let mass = cell_masses(op, stationary).expect("density grid mismatch");
    let fv = f.values();
    let mut d = 0.0;
    for (k, row) in op.rows().iter().enumerate() {
        if mass[k] == 0.0 {
            continue;
        }
        let s: f64 = row
            .iter()
            .map(|&(l, v)| {
                let df = fv[k] - fv[l];
                v * df * df
            })
            .sum();
        d += mass[k] * s;
    }
    d *= beta / 2.0;

    let rf = op.apply_right(fv);
    let inner: f64 = (0..fv.len())
        .map(|k| mass[k] * fv[k] * (fv[k] - rf[k]))
        .sum::<f64>()
        * beta;
    assert!(
        (d - inner).abs() <= 1e-8 * d.abs().max(1.0),
        "Dirichlet form {d} disagrees with quadratic form {inner}; \
         the supplied density is not stationary for the operator"
    );
    d
}

/// Grid-exact well-to-well rates from absorbed-chain solves.
#[derive(Debug, Clone)]
pub struct GridRates {
    /// `theta[i][j]`: rate from well `i+1` to well `j+1`; zero diagonal.
    pub theta: Vec<Vec<f64>>,
    /// Stationary mass of each well.
    pub well_masses: Vec<f64>,
}

/// Computes `θ(i,j) = β/μ(E_i) · Σ_{k ∈ E_i} μ[k] P_k[next well entered
/// is E_j]`, with the inner probability obtained by absorbing the chain
/// on the wells and solving the hole cells exactly.
pub fn theta_grid(
    op: &UlamOperator,
    stationary: &GridFunction,
    beta: f64,
    wells: &WellStructure,
) -> Result<GridRates, ResolventError> {
    assert!(beta > 0.0, "clock rate must be positive");
    let n = op.n_cells();
    let mass = cell_masses(op, stationary)?;
    let cells = classify_cells(op.grid(), wells);
    let kappa = wells.kappa();

    let well_masses: Vec<f64> = cells
        .per_well
        .iter()
        .map(|ks| ks.iter().map(|&k| mass[k]).sum())
        .collect();
    if let Some(i) = well_masses.iter().position(|&m| m < ZERO_MASS) {
        return Err(ResolventError::MasslessWell(i + 1));
    }

    let interior: Vec<usize> = cells
        .hole
        .iter()
        .copied()
        .filter(|&k| mass[k] >= ZERO_MASS)
        .collect();

    let mut theta = vec![vec![0.0; kappa]; kappa];
    for j in 0..kappa {
        let mut target = vec![false; n];
        for &k in &cells.per_well[j] {
            target[k] = true;
        }
        let u = harmonic_extension(op, &interior, &target)?;
        let mut w = vec![0.0; n];
        for &k in &cells.per_well[j] {
            w[k] = 1.0;
        }
        for (ik, &k) in interior.iter().enumerate() {
            w[k] = u[ik];
        }
        let rw = op.apply_right(&w);
        for i in 0..kappa {
            if i == j {
                continue;
            }
            let num: f64 = cells.per_well[i].iter().map(|&k| mass[k] * rw[k]).sum();
            theta[i][j] = beta * num / well_masses[i];
        }
    }
    Ok(GridRates { theta, well_masses })
}

/// The rate identities tying the forward rates, the reversed rates, and
/// the capacities together.
#[derive(Debug, Clone)]
pub struct RateIdentityReport {
    pub theta: Vec<Vec<f64>>,
    pub theta_adjoint: Vec<Vec<f64>>,
    pub well_masses: Vec<f64>,
    /// `cap(E_i, Ě_i)` per well.
    pub capacities: Vec<f64>,
    /// Worst relative error of `μ(E_i) θ(i,j) = μ(E_j) θ†(j,i)`.
    pub max_balance_error: f64,
    /// Worst relative error among the row sums of `θ`, of `θ†`, and
    /// `cap(E_i, Ě_i)/μ(E_i)`.
    pub max_sum_error: f64,
    pub tol: f64,
    pub pass: bool,
}

fn rel_gap(x: f64, y: f64) -> f64 {
    let scale = x.abs().max(y.abs());
    if scale == 0.0 {
        0.0
    } else {
        (x - y).abs() / scale
    }
}

/// Computes the grid rates for the chain and its time reversal and
/// checks the flow-balance and capacity identities against `tol`
/// (relative). Violations are reported, not raised.
pub fn check_rate_identities(
    op: &UlamOperator,
    stationary: &GridFunction,
    beta: f64,
    wells: &WellStructure,
    tol: f64,
) -> Result<RateIdentityReport, ResolventError> {
    let forward = theta_grid(op, stationary, beta, wells)?;
    let reversed_op = adjoint_kernel(op, stationary)?;
    let reversed = theta_grid(&reversed_op, stationary, beta, wells)?;
    let kappa = wells.kappa();
    let cells = classify_cells(op.grid(), wells);

    let mut capacities = vec![0.0; kappa];
    for i in 0..kappa {
        let a = &cells.per_well[i];
        let b: Vec<usize> = (0..kappa)
            .filter(|&j| j != i)
            .flat_map(|j| cells.per_well[j].iter().copied())
            .collect();
        capacities[i] = capacity(op, stationary, beta, a, &b)?;
    }

    let mut max_balance_error = 0.0f64;
    for i in 0..kappa {
        for j in 0..kappa {
            if i == j {
                continue;
            }
            let lhs = forward.well_masses[i] * forward.theta[i][j];
            let rhs = reversed.well_masses[j] * reversed.theta[j][i];
            max_balance_error = max_balance_error.max(rel_gap(lhs, rhs));
        }
    }

    let mut max_sum_error = 0.0f64;
    for i in 0..kappa {
        let s: f64 = forward.theta[i].iter().sum();
        let s_dag: f64 = reversed.theta[i].iter().sum();
        let from_cap = capacities[i] / forward.well_masses[i];
        max_sum_error = max_sum_error
            .max(rel_gap(s, s_dag))
            .max(rel_gap(s, from_cap));
    }

    let pass = max_balance_error <= tol && max_sum_error <= tol;
    Ok(RateIdentityReport {
        theta: forward.theta,
        theta_adjoint: reversed.theta,
        well_masses: forward.well_masses,
        capacities,
        max_balance_error,
        max_sum_error,
        tol,
        pass,
    })
}
