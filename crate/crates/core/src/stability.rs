//! Stochastic-stability diagnostics: the limit measure, total-variation
//! distances on the grid, the operator-closeness sequence `d_ε`, and the
//! Chen–Stein-style stability report.
//!
//! The limit measure mixes the per-component deterministic invariant
//! densities with the weights `π` that make the reduced κ-state generator
//! stationary. The report tracks, along a decreasing grid of noise sizes,
//! how far the perturbed stationary density is from that limit in total
//! variation, and compares the distance against the bound
//! `C·[q_ε log q_ε⁻¹ + d_ε log d_ε⁻¹] + Σ_i |μ_ε(I_i) − π(i)|` with the
//! smallest constant `C` that makes the bound hold on the grid.

use crate::grid::{Grid, GridFunction};
use crate::linalg::SparseSolver;
use crate::maps::{MapError, WellId};
use crate::noise::NoiseError;
use crate::resolvent::ReducedGenerator;
use crate::scenarios::Scenario;
use crate::ulam::{self, UlamError, UlamOperator};
use rayon::prelude::*;
use thiserror::Error;

/// Accepted sup-norm residual of the direct sparse solves.
const SOLVE_RESIDUAL: f64 = 1e-8;

/// Points per grid cell when resolving the perturbed operator.
const POINTS_PER_CELL: usize = 32;

/// Quadrature nodes per noise stratum for the restricted operators.
const NODES_PER_STRATUM: usize = 32;

/// Convergence tolerance for the stationary densities inside the report.
const STATIONARY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("densities live on different grids")]
    GridMismatch,
    #[error("expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("the reduced chain does not have a unique invariant distribution")]
    Reducible,
    #[error("the noise grid is empty")]
    EmptyGrid,
    #[error("the noise grid must be strictly decreasing at index {index}")]
    NotDecreasing { index: usize },
    #[error("input integrates to {integral}, not 1")]
    NotADensity { integral: f64 },
    #[error("cell set is empty or out of range")]
    BadCellSet,
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Ulam(#[from] UlamError),
    #[error("linear-algebra backend: {0}")]
    Backend(String),
}

/// Per-ε stability summary along a decreasing grid of noise sizes.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    /// The noise sizes, strictly decreasing.
    pub eps_grid: Vec<f64>,
    /// Total-variation distance between the perturbed stationary density
    /// and the limit measure, per ε.
    pub dtv: Vec<f64>,
    /// Probability that the master draw is positive, per ε.
    pub q_eps: Vec<f64>,
    /// Operator closeness between the deterministic and the restricted
    /// perturbed transfer operators, maximised over components, per ε.
    pub d_eps: Vec<f64>,
    /// Stationary mass of each component under the perturbed density,
    /// per ε.
    pub component_masses: Vec<Vec<f64>>,
    /// `Σ_i |μ_ε(I_i) − π(i)|` per ε.
    pub mass_gap: Vec<f64>,
    /// `C·[q_ε log q_ε⁻¹ + d_ε log d_ε⁻¹] + mass_gap` per ε with the
    /// fitted constant.
    pub bound_rhs: Vec<f64>,
    /// `bound_rhs − dtv` per ε; nonnegative by construction of the fit.
    pub slack: Vec<f64>,
    /// The smallest constant making the bound hold at every grid point.
    pub fit_c: f64,
    /// Invariant distribution of the reduced chain.
    pub pi: Vec<f64>,
}

/// The invariant distribution of the reduced κ-state generator: the
/// probability vector `π` with `π𝓛 = 0`.
///
/// Errors with [`StabilityError::Reducible`] when the chain does not
/// communicate, in which case `π` is not unique.
pub fn invariant_distribution(reduced: &ReducedGenerator) -> Result<Vec<f64>, StabilityError> {
    if !reduced.is_irreducible() {
        return Err(StabilityError::Reducible);
    }
    let k = reduced.kappa();
    let theta = reduced.rates();
    // Unknown π as a column vector: κ − 1 stationarity equations (one per
    // state, the last dropped as redundant) plus the normalization Σπ = 1.
    let mut triplets = Vec::new();
    for j in 0..k - 1 {
        for i in 0..k {
            let l_ij = if i == j {
                -theta[i].iter().sum::<f64>()
            } else {
                theta[i][j]
            };
            if l_ij != 0.0 {
                triplets.push((j, i, l_ij));
            }
        }
    }
    for i in 0..k {
        triplets.push((k - 1, i, 1.0));
    }
    let mut rhs = vec![0.0; k];
    rhs[k - 1] = 1.0;
    let solver = SparseSolver::new(k, &triplets).map_err(StabilityError::Backend)?;
    let mut pi = solver.solve(&rhs);

    let scale = theta
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(1.0f64, f64::max);
    for j in 0..k {
        let balance: f64 = (0..k)
            .map(|i| {
                let l_ij = if i == j {
                    -theta[i].iter().sum::<f64>()
                } else {
                    theta[i][j]
                };
                pi[i] * l_ij
            })
            .sum();
        if balance.abs() > SOLVE_RESIDUAL * scale {
            return Err(StabilityError::Backend(format!(
                "invariant distribution residual {balance} at state {j}"
            )));
        }
    }
    if pi.iter().any(|&v| v <= 0.0) {
        return Err(StabilityError::Backend(
            "invariant distribution has a non-positive entry".into(),
        ));
    }
    let total: f64 = pi.iter().sum();
    for v in &mut pi {
        *v /= total;
    }
    Ok(pi)
}

/// Mixes densities living on sub-grids into one density on the ambient
/// grid: cell value `(1/h)·Σ_i w_i·∫_cell p_i`.
///
/// The resampling is exact for piecewise-constant densities, so the
/// integral of the output is `Σ_i w_i·∫ p_i` up to rounding.
pub fn mixture_on_grid(
    ambient: Grid,
    weights: &[f64],
    densities: &[GridFunction],
) -> Result<GridFunction, StabilityError> {
    if weights.len() != densities.len() {
        return Err(StabilityError::DimensionMismatch {
            expected: weights.len(),
            got: densities.len(),
        });
    }
    let hull = ambient.interval();
    for d in densities {
        let iv = d.grid().interval();
        if iv.lo < hull.lo - 1e-12 || iv.hi > hull.hi + 1e-12 {
            return Err(StabilityError::GridMismatch);
        }
    }
    let h = ambient.h();
    let values = (0..ambient.n())
        .map(|k| {
            let cell = crate::geometry::IntervalUnion::singleton(ambient.cell(k));
            weights
                .iter()
                .zip(densities)
                .map(|(w, d)| w * d.integral_over(&cell))
                .sum::<f64>()
                / h
        })
        .collect();
    Ok(GridFunction::new(ambient, values))
}

/// The limit measure: the mixture `Σ_i π(i)·p_i` of the per-component
/// invariant densities, weighted by the invariant distribution of the
/// reduced generator, resampled onto the ambient grid.
pub fn limit_measure(
    reduced: &ReducedGenerator,
    component_acims: &[GridFunction],
    ambient: Grid,
) -> Result<GridFunction, StabilityError> {
    let pi = invariant_distribution(reduced)?;
    if component_acims.len() != pi.len() {
        return Err(StabilityError::DimensionMismatch {
            expected: pi.len(),
            got: component_acims.len(),
        });
    }
    for d in component_acims {
        let integral = d.integral();
        if (integral - 1.0).abs() > 1e-8 {
            return Err(StabilityError::NotADensity { integral });
        }
    }
    mixture_on_grid(ambient, &pi, component_acims)
}

/// Total-variation distance `(h/2)·Σ_k |f_k − g_k|` between two grid
/// densities on the same grid.
pub fn dtv_grid(f: &GridFunction, g: &GridFunction) -> Result<f64, StabilityError> {
    if f.grid() != g.grid() {
        return Err(StabilityError::GridMismatch);
    }
    let h = f.grid().h();
    let sum: f64 = f
        .values()
        .iter()
        .zip(g.values())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(0.5 * h * sum)
}

/// Operator closeness `‖(P − P̃)p̃‖₁ / ‖p̃‖_BV` of two transfer operators
/// on the same grid, measured on the density `p̃`.
pub fn operator_closeness_d_eps(
    p_full: &UlamOperator,
    p_rest: &UlamOperator,
    p_rest_density: &GridFunction,
) -> Result<f64, StabilityError> {
    if p_full.grid() != p_rest.grid() || p_full.grid() != p_rest_density.grid() {
        return Err(StabilityError::GridMismatch);
    }
    let h = p_full.grid().h();
    let a = p_full.apply_left(p_rest_density.values());
    let b = p_rest.apply_left(p_rest_density.values());
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() * h;
    let den = ulam::bv_norm(p_rest_density);
    if den <= 0.0 {
        return Err(StabilityError::NotADensity { integral: 0.0 });
    }
    Ok(num / den)
}

/// `x log x⁻¹` with the conventions `0 log 0⁻¹ = 0` and a floor of zero
/// so that values at or above 1 cannot shrink the bound.
fn entropy_term(x: f64) -> f64 {
    if x > 0.0 && x < 1.0 {
        x * (1.0 / x).ln()
    } else {
        0.0
    }
}

/// Per-ε ingredients computed independently inside the report.
struct EpsRow {
    q_eps: f64,
    d_eps: f64,
    dtv: f64,
    masses: Vec<f64>,
}

/// Builds the stability report for a scenario along a strictly decreasing
/// grid of noise sizes.
///
/// For each ε this computes the perturbed stationary density `μ_ε`, the
/// component masses `μ_ε(I_i)`, the positive-side noise probability
/// `q_ε`, the operator closeness `d_ε` (maximised over components, each
/// measured on its own restricted stationary density), and the
/// total-variation distance to the limit measure. The constant `C` is
/// then fitted as the smallest value making
/// `C·[q_ε log q_ε⁻¹ + d_ε log d_ε⁻¹] + Σ_i |μ_ε(I_i) − π(i)| ≥ d_TV`
/// hold at every grid point.
pub fn chen_stein_report(
    scenario: &Scenario,
    reduced: &ReducedGenerator,
    eps_grid: &[f64],
    exponent_q: f64,
    n_cells: usize,
) -> Result<StabilityReport, StabilityError> {
    if eps_grid.is_empty() {
        return Err(StabilityError::EmptyGrid);
    }
    for (index, pair) in eps_grid.windows(2).enumerate() {
        if pair[1] >= pair[0] {
            return Err(StabilityError::NotDecreasing { index: index + 1 });
        }
    }
    let kappa = scenario.map.kappa();
    if reduced.kappa() != kappa {
        return Err(StabilityError::DimensionMismatch {
            expected: kappa,
            got: reduced.kappa(),
        });
    }

    let ambient = Grid::new(scenario.map.ambient(), n_cells);
    let ambient_len = scenario.map.ambient().len();
    let pi = invariant_distribution(reduced)?;

    // Component cell counts proportional to length, so the cell width on
    // every component grid matches the ambient one as closely as possible.
    let component_cells: Vec<usize> = scenario
        .map
        .components()
        .iter()
        .map(|c| {
            let share = n_cells as f64 * c.interval().len() / ambient_len;
            (share.round() as usize).max(64)
        })
        .collect();

    // The deterministic transfer operators and their invariant densities
    // do not depend on ε.
    let det_ops: Vec<UlamOperator> = (1..=kappa)
        .map(|i| ulam::build_deterministic(&scenario.map, WellId(i), component_cells[i - 1]))
        .collect::<Result<_, _>>()?;
    let det_acims: Vec<GridFunction> = det_ops
        .iter()
        .map(|op| ulam::stationary_density(op, STATIONARY_TOL))
        .collect::<Result<_, _>>()?;
    let limit = mixture_on_grid(ambient, &pi, &det_acims)?;

    let rows: Vec<EpsRow> = eps_grid
        .par_iter()
        .map(|&eps| -> Result<EpsRow, StabilityError> {
            let kernel = scenario.kernel(eps, exponent_q)?;
            let q_eps = kernel.noise.q_eps();
            let full = ulam::build_perturbed(&kernel, n_cells, POINTS_PER_CELL)?;
            let mu_eps = ulam::stationary_density(&full, STATIONARY_TOL)?;
            let masses: Vec<f64> = scenario
                .map
                .components()
                .iter()
                .map(|c| {
                    mu_eps.integral_over(&crate::geometry::IntervalUnion::singleton(c.interval()))
                })
                .collect();
            let mut d_eps = 0.0f64;
            for i in 1..=kappa {
                let restricted = ulam::build_restricted(
                    scenario,
                    WellId(i),
                    eps,
                    exponent_q,
                    component_cells[i - 1],
                    NODES_PER_STRATUM,
                )?;
                let p_rest = ulam::stationary_density(&restricted, STATIONARY_TOL)?;
                let d_i = operator_closeness_d_eps(&det_ops[i - 1], &restricted, &p_rest)?;
                d_eps = d_eps.max(d_i);
            }
            let dtv = dtv_grid(&mu_eps, &limit)?;
            Ok(EpsRow {
                q_eps,
                d_eps,
                dtv,
                masses,
            })
        })
        .collect::<Result<_, _>>()?;

    let mass_gap: Vec<f64> = rows
        .iter()
        .map(|r| {
            r.masses
                .iter()
                .zip(&pi)
                .map(|(m, p)| (m - p).abs())
                .sum::<f64>()
        })
        .collect();
    let mut fit_c = 0.0f64;
    for (row, gap) in rows.iter().zip(&mass_gap) {
        let bracket = entropy_term(row.q_eps) + entropy_term(row.d_eps);
        let excess = (row.dtv - gap).max(0.0);
        if bracket > 0.0 {
            fit_c = fit_c.max(excess / bracket);
        } else if excess > 0.0 {
            return Err(StabilityError::Backend(
                "cannot fit the bound constant: the entropy bracket vanishes".into(),
            ));
        }
    }
    let bound_rhs: Vec<f64> = rows
        .iter()
        .zip(&mass_gap)
        .map(|(row, gap)| fit_c * (entropy_term(row.q_eps) + entropy_term(row.d_eps)) + gap)
        .collect();
    let slack: Vec<f64> = bound_rhs
        .iter()
        .zip(rows.iter())
        .map(|(b, row)| b - row.dtv)
        .collect();

    Ok(StabilityReport {
        eps_grid: eps_grid.to_vec(),
        dtv: rows.iter().map(|r| r.dtv).collect(),
        q_eps: rows.iter().map(|r| r.q_eps).collect(),
        d_eps: rows.iter().map(|r| r.d_eps).collect(),
        component_masses: rows.into_iter().map(|r| r.masses).collect(),
        mass_gap,
        bound_rhs,
        slack,
        fit_c,
        pi,
    })
}

/// Self-consistency of the generator machinery at the grid level: solves
/// the Poisson equation `L F = χ_A − μ(A)` for a cell set `A` (pinning
/// the μ-weighted mean of `F` to zero to fix the additive constant) and
/// returns `|E_μ[L F]|`, which vanishes when `μ` is stationary for the
/// operator and the solve is accurate.
pub fn poisson_mean_defect(
    op: &UlamOperator,
    stationary: &GridFunction,
    beta: f64,
    cells: &[usize],
) -> Result<f64, StabilityError> {
    assert!(beta > 0.0 && beta.is_finite(), "clock rate must be positive");
    if op.grid() != stationary.grid() {
        return Err(StabilityError::GridMismatch);
    }
    let n = op.n_cells();
    if cells.is_empty() || cells.iter().any(|&k| k >= n) {
        return Err(StabilityError::BadCellSet);
    }
    let h = op.grid().h();
    let masses: Vec<f64> = stationary.values().iter().map(|&p| p * h).collect();
    let mut in_set = vec![false; n];
    for &k in cells {
        in_set[k] = true;
    }
    let mu_a: f64 = (0..n).filter(|&k| in_set[k]).map(|k| masses[k]).sum();

    // Scaled system (R − I)F = rhs/β, with the row of the heaviest cell
    // replaced by the pinning equation Σ_l μ_l F_l = 0.
    let anchor = (0..n)
        .max_by(|&a, &b| masses[a].total_cmp(&masses[b]))
        .expect("grid has at least one cell");
    let mut triplets = Vec::new();
    let mut scaled_rhs = vec![0.0; n];
    for k in 0..n {
        if k == anchor {
            for (l, &m) in masses.iter().enumerate() {
                if m != 0.0 {
                    triplets.push((k, l, m));
                }
            }
            continue;
        }
        let mut diag = -1.0;
        for &(l, v) in &op.rows()[k] {
            if l == k {
                diag += v;
            } else {
                triplets.push((k, l, v));
            }
        }
        triplets.push((k, k, diag));
        scaled_rhs[k] = (if in_set[k] { 1.0 } else { 0.0 } - mu_a) / beta;
    }
    let solver = SparseSolver::new(n, &triplets).map_err(StabilityError::Backend)?;
    let f = solver.solve(&scaled_rhs);

    let rf = op.apply_right(&f);
    let mut residual = 0.0f64;
    for k in 0..n {
        if k == anchor {
            continue;
        }
        residual = residual.max((rf[k] - f[k] - scaled_rhs[k]).abs());
    }
    let scale = scaled_rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if residual > SOLVE_RESIDUAL * scale {
        return Err(StabilityError::Backend(format!(
            "Poisson solve residual {residual}"
        )));
    }

    let defect: f64 = (0..n)
        .map(|k| masses[k] * beta * (rf[k] - f[k]))
        .sum::<f64>();
    Ok(defect.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Interval;
    use crate::scenarios;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn symmetric_two_state() -> ReducedGenerator {
        ReducedGenerator::new(vec![vec![0.0, 0.7], vec![0.7, 0.0]]).unwrap()
    }

    #[test]
    fn symmetric_two_state_balances_evenly() {
        let pi = invariant_distribution(&symmetric_two_state()).unwrap();
        assert!((pi[0] - 0.5).abs() <= 1e-14);
        assert!((pi[1] - 0.5).abs() <= 1e-14);
    }

    #[test]
    fn three_state_chain_matches_closed_form_oracle() {
        // Birth-death rates 1→2: 0.4, 2→1: 0.25, 2→3: 0.15, 3→2: 0.35.
        // Detailed balance gives π ∝ (0.25/0.4, 1, 0.15/0.35), i.e.
        // (35, 56, 24)/115 — derived by hand, frozen here.
        let reduced = ReducedGenerator::new(vec![
            vec![0.0, 0.4, 0.0],
            vec![0.25, 0.0, 0.15],
            vec![0.0, 0.35, 0.0],
        ])
        .unwrap();
        let pi = invariant_distribution(&reduced).unwrap();
        assert!((pi[0] - 35.0 / 115.0).abs() <= 1e-12, "pi0 = {}", pi[0]);
        assert!((pi[1] - 56.0 / 115.0).abs() <= 1e-12, "pi1 = {}", pi[1]);
        assert!((pi[2] - 24.0 / 115.0).abs() <= 1e-12, "pi2 = {}", pi[2]);
    }

    #[test]
    fn reducible_chains_are_rejected() {
        let reduced =
            ReducedGenerator::new(vec![vec![0.0, 0.0], vec![0.5, 0.0]]).unwrap();
        assert!(matches!(
            invariant_distribution(&reduced),
            Err(StabilityError::Reducible)
        ));
    }

    #[test]
    fn deterministic_mixture_is_a_density() {
        let s = scenarios::two_well(0.05);
        let acims: Vec<GridFunction> = (1..=2)
            .map(|i| {
                let op = ulam::build_deterministic(&s.map, WellId(i), 512).unwrap();
                ulam::stationary_density(&op, 1e-12).unwrap()
            })
            .collect();
        let ambient = Grid::new(s.map.ambient(), 1024);
        let limit = limit_measure(&symmetric_two_state(), &acims, ambient).unwrap();
        assert!((limit.integral() - 1.0).abs() <= 1e-12);
        let left = crate::geometry::IntervalUnion::singleton(Interval::new(0.0, 0.5));
        assert!((limit.integral_over(&left) - 0.5).abs() <= 1e-12);
        assert!(limit.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn mismatched_component_count_is_rejected() {
        let ambient = Grid::new(Interval::new(0.0, 1.0), 64);
        let one = GridFunction::uniform_density(Grid::new(Interval::new(0.0, 0.5), 64));
        let err = limit_measure(&symmetric_two_state(), &[one], ambient);
        assert!(matches!(
            err,
            Err(StabilityError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn total_variation_basics() {
        let grid = Grid::new(Interval::new(0.0, 1.0), 128);
        let f = GridFunction::uniform_density(grid);
        assert_eq!(dtv_grid(&f, &f).unwrap(), 0.0);

        let left = GridFunction::from_fn(grid, |x| if x < 0.5 { 2.0 } else { 0.0 });
        let right = GridFunction::from_fn(grid, |x| if x >= 0.5 { 2.0 } else { 0.0 });
        assert!((dtv_grid(&left, &right).unwrap() - 1.0).abs() <= 1e-12);

        let other = GridFunction::uniform_density(Grid::new(Interval::new(0.0, 1.0), 64));
        assert!(matches!(
            dtv_grid(&f, &other),
            Err(StabilityError::GridMismatch)
        ));
    }

    #[test]
    fn total_variation_is_a_metric_on_random_triples() {
        let grid = Grid::new(Interval::new(0.0, 1.0), 64);
        let mut rng = ChaCha8Rng::seed_from_u64(0x7419_13);
        for _ in 0..10 {
            let mut draw = || {
                let mut f = GridFunction::from_fn(grid, |_| 0.0);
                for v in f.values_mut() {
                    *v = rng.random::<f64>();
                }
                f.normalize();
                f
            };
            let (f, g, k) = (draw(), draw(), draw());
            let fg = dtv_grid(&f, &g).unwrap();
            let gf = dtv_grid(&g, &f).unwrap();
            let fk = dtv_grid(&f, &k).unwrap();
            let gk = dtv_grid(&g, &k).unwrap();
            assert!(fg >= 0.0 && fg <= 1.0 + 1e-12);
            assert!((fg - gf).abs() <= 1e-15);
            assert!(fk <= fg + gk + 1e-12, "triangle: {fk} > {fg} + {gk}");
        }
    }

    #[test]
    fn identical_operators_have_zero_distance() {
        let s = scenarios::two_well(0.12);
        let op = ulam::build_deterministic(&s.map, WellId(1), 256).unwrap();
        let p = ulam::stationary_density(&op, 1e-12).unwrap();
        assert_eq!(operator_closeness_d_eps(&op, &op, &p).unwrap(), 0.0);
    }

    #[test]
    fn restricted_distance_shrinks_linearly_with_eps() {
        let s = scenarios::two_well(0.12);
        let det = ulam::build_deterministic(&s.map, WellId(1), 512).unwrap();
        let mut ratios = Vec::new();
        let mut raw = Vec::new();
        for eps in [0.1, 0.05] {
            let restricted =
                ulam::build_restricted(&s, WellId(1), eps, 3.0, 512, 32).unwrap();
            let p = ulam::stationary_density(&restricted, 1e-12).unwrap();
            let d = operator_closeness_d_eps(&det, &restricted, &p).unwrap();
            assert!(d > 0.0, "restriction at ε = {eps} moved no mass");
            ratios.push(d / eps);
            raw.push(d);
        }
        assert!(raw[1] < raw[0], "d_ε should shrink with ε: {raw:?}");
        assert!(
            ratios[1] <= 2.0 * ratios[0],
            "d_ε/ε grew beyond linear: {ratios:?}"
        );
    }

    #[test]
    fn one_step_distance_telescopes_over_powers() {
        let s = scenarios::two_well(0.12);
        let det = ulam::build_deterministic(&s.map, WellId(1), 512).unwrap();
        let restricted = ulam::build_restricted(&s, WellId(1), 0.05, 3.0, 512, 32).unwrap();
        let p = ulam::stationary_density(&restricted, 1e-12).unwrap();
        let d = operator_closeness_d_eps(&det, &restricted, &p).unwrap();
        let bv = ulam::bv_norm(&p);
        let h = p.grid().h();
        for n in [1usize, 2, 4] {
            let mut a = p.values().to_vec();
            let mut b = p.values().to_vec();
            for _ in 0..n {
                a = det.apply_left(&a);
                b = restricted.apply_left(&b);
            }
            let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() * h;
            assert!(
                diff <= n as f64 * d * bv + 1e-9,
                "power {n}: {diff} > {} ", n as f64 * d * bv
            );
        }
    }

    #[test]
    fn report_tracks_two_well_contraction() {
        let s = scenarios::two_well(0.12);
        let reduced = symmetric_two_state();
        let report = chen_stein_report(&s, &reduced, &[0.1, 0.05], 3.0, 1024).unwrap();

        assert_eq!(report.eps_grid, vec![0.1, 0.05]);
        assert!(report.q_eps[0] > report.q_eps[1]);
        for (i, &dtv) in report.dtv.iter().enumerate() {
            assert!((0.0..=1.0).contains(&dtv));
            assert!(
                report.bound_rhs[i] >= dtv - 1e-12,
                "bound violated at ε = {}",
                report.eps_grid[i]
            );
            assert!(report.slack[i] >= -1e-12);
            assert!(
                report.mass_gap[i] <= 2e-3,
                "symmetric wells should split mass evenly, gap = {}",
                report.mass_gap[i]
            );
        }
        assert!(
            report.dtv[1] < report.dtv[0],
            "d_TV should shrink with ε: {:?}",
            report.dtv
        );
        assert!(report.d_eps.iter().all(|&d| d > 0.0));
        assert!(report.fit_c >= 0.0);
    }

    #[test]
    fn bad_eps_grids_are_rejected() {
        let s = scenarios::two_well(0.12);
        let reduced = symmetric_two_state();
        assert!(matches!(
            chen_stein_report(&s, &reduced, &[], 3.0, 256),
            Err(StabilityError::EmptyGrid)
        ));
        assert!(matches!(
            chen_stein_report(&s, &reduced, &[0.05, 0.1], 3.0, 256),
            Err(StabilityError::NotDecreasing { index: 1 })
        ));
    }

    #[test]
    fn restricted_mixture_conserves_mass() {
        let s = scenarios::two_well(0.12);
        let eps = 0.05;
        let kernel = s.kernel(eps, 3.0).unwrap();
        let full = ulam::build_perturbed(&kernel, 1024, 32).unwrap();
        let mu_eps = ulam::stationary_density(&full, 1e-12).unwrap();
        let masses: Vec<f64> = s
            .map
            .components()
            .iter()
            .map(|c| {
                mu_eps.integral_over(&crate::geometry::IntervalUnion::singleton(c.interval()))
            })
            .collect();
        let restricted_acims: Vec<GridFunction> = (1..=2)
            .map(|i| {
                let op = ulam::build_restricted(&s, WellId(i), eps, 3.0, 512, 32).unwrap();
                ulam::stationary_density(&op, 1e-12).unwrap()
            })
            .collect();
        let ambient = Grid::new(s.map.ambient(), 1024);
        let mixture = mixture_on_grid(ambient, &masses, &restricted_acims).unwrap();
        assert!(
            (mixture.integral() - 1.0).abs() <= 1e-10,
            "mixture mass {}",
            mixture.integral()
        );
    }

    #[test]
    fn poisson_solutions_have_zero_mean_under_stationarity() {
        let s = scenarios::two_well(0.05);
        let kernel = s.kernel(0.05, 1.5).unwrap();
        let op = ulam::build_perturbed(&kernel, 256, 32).unwrap();
        let stationary = ulam::stationary_density(&op, 1e-13).unwrap();
        let beta = 1.0 / kernel.noise.q_eps();
        let mut rng = ChaCha8Rng::seed_from_u64(0x900d_5e7);
        for round in 0..10 {
            let cells: Vec<usize> = (0..op.n_cells()).filter(|_| rng.random::<f64>() < 0.3).collect();
            assert!(!cells.is_empty());
            let defect = poisson_mean_defect(&op, &stationary, beta, &cells).unwrap();
            assert!(
                defect <= 1e-7,
                "round {round}: E_μ[LF] = {defect} should vanish"
            );
        }
    }

    #[test]
    fn poisson_guards_reject_bad_input() {
        let s = scenarios::two_well(0.05);
        let kernel = s.kernel(0.05, 1.5).unwrap();
        let op = ulam::build_perturbed(&kernel, 256, 32).unwrap();
        let stationary = ulam::stationary_density(&op, 1e-12).unwrap();
        assert!(matches!(
            poisson_mean_defect(&op, &stationary, 5.0, &[]),
            Err(StabilityError::BadCellSet)
        ));
        assert!(matches!(
            poisson_mean_defect(&op, &stationary, 5.0, &[9999]),
            Err(StabilityError::BadCellSet)
        ));
    }
}
