//! Monte Carlo engine for the perturbed chain and its sped-up jump process.
//!
//! The discrete chain applies the map and adds the regional noise offset
//! each step; the jump process embeds the chain at exponential holding times
//! of mean `1/β`. On top of these sit hitting-time samplers, escape-time
//! samplers, transition-rate estimators, trace/order path extraction, and
//! two deterministic cross-checks: path-weight quadrature for one- and
//! two-jump crossing probabilities, and the noise-support growth count.
//!
//! Reproducibility: every sampler derives one RNG stream per sample from
//! `(seed, sample index)`, so results are bit-identical for a given seed
//! regardless of thread count or scheduling.

use crate::geometry::{Interval, IntervalUnion};
use crate::grid::GridFunction;
use crate::maps::{MapError, WellId};
use crate::noise::{NoiseError, NoiseModel};
use crate::scenarios::Scenario;
use crate::wells::WellStructure;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Per-sample step cap guarding against non-termination.
pub const STEP_CAP: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("wells {0} and {1} are not adjacent")]
    NonAdjacent(WellId, WellId),
    #[error("support growth failed to cover the image of component {0}")]
    CoverageFailure(WellId),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// The perturbed system: a scenario, its noise model at one `(ε, q)`, and
/// the jump-process time scale `β`.
#[derive(Debug, Clone)]
pub struct PerturbedSystem {
    pub scenario: Scenario,
    pub noise: NoiseModel,
    /// Jump rate of the sped-up clock; defaults to `1/q_ε`.
    pub beta: f64,
}

impl PerturbedSystem {
    pub fn new(scenario: Scenario, epsilon: f64, exponent_q: f64) -> Result<Self, NoiseError> {
        let noise = scenario.noise_model(epsilon, exponent_q)?;
        let beta = 1.0 / noise.q_eps();
        Ok(Self {
            scenario,
            noise,
            beta,
        })
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        assert!(beta > 0.0);
        self.beta = beta;
        self
    }

    /// One exponential holding time of the sped-up clock.
    fn holding_time(&self, rng: &mut ChaCha8Rng) -> f64 {
        // 1 − u ∈ (0, 1] keeps the logarithm finite
        -(1.0 - rng.random::<f64>()).ln() / self.beta
    }
}

/// One chain step `x ↦ T(x) + offset(x, master draw)`.
pub fn step_chain(
    system: &PerturbedSystem,
    x: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, MapError> {
    let u: f64 = rng.random();
    Ok(system.scenario.map.eval(x)? + system.noise.sample(x, u)?)
}

/// An embedded chain path with its sped-up jump times (`τ_0 = 0`).
#[derive(Debug, Clone)]
pub struct JumpPath {
    pub states: Vec<f64>,
    pub jump_times: Vec<f64>,
    pub horizon: f64,
}

impl JumpPath {
    /// Realized holding times, including the truncated final dwell.
    pub fn dwell_times(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.states.len());
        for w in self.jump_times.windows(2) {
            out.push(w[1] - w[0]);
        }
        out.push(self.horizon - *self.jump_times.last().unwrap());
        out
    }
}

/// Simulates the jump process from `x0` until `horizon` on the sped-up
/// clock. Per step the holding time is drawn first, then the chain step.
pub fn run_jump_path(
    system: &PerturbedSystem,
    x0: f64,
    horizon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<JumpPath, MapError> {
    assert!(horizon > 0.0);
    let mut states = vec![x0];
    let mut jump_times = vec![0.0];
    let mut t = 0.0;
    let mut x = x0;
    loop {
        t += system.holding_time(rng);
        if t > horizon {
            return Ok(JumpPath {
                states,
                jump_times,
                horizon,
            });
        }
        x = step_chain(system, x, rng)?;
        states.push(x);
        jump_times.push(t);
    }
}

/// Where a sampler starts each run.
#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    Point(f64),
    UniformOn(&'a IntervalUnion),
    /// Inverse-CDF draw from a piecewise-constant density.
    FromDensity(&'a GridFunction),
}

/// Cumulative masses for inverse-CDF sampling from a grid density.
struct DensitySampler {
    grid: crate::grid::Grid,
    cumulative: Vec<f64>,
}

impl DensitySampler {
    fn new(density: &GridFunction) -> Self {
        let h = density.grid().h();
        let mut cumulative = Vec::with_capacity(density.values().len());
        let mut acc = 0.0;
        for &v in density.values() {
            acc += v.max(0.0) * h;
            cumulative.push(acc);
        }
        assert!(acc > 0.0, "density carries no mass");
        Self {
            grid: density.grid(),
            cumulative,
        }
    }

    fn draw(&self, u: f64) -> f64 {
        let total = *self.cumulative.last().unwrap();
        let target = u * total;
        let k = self.cumulative.partition_point(|&c| c <= target);
        let k = k.min(self.cumulative.len() - 1);
        let below = if k == 0 { 0.0 } else { self.cumulative[k - 1] };
        let mass = self.cumulative[k] - below;
        let frac = if mass > 0.0 {
            (target - below) / mass
        } else {
            0.5
        };
        let cell = self.grid.cell(k);
        cell.lo + frac * cell.len()
    }
}

enum StartSampler<'a> {
    Point(f64),
    Uniform(&'a IntervalUnion, f64),
    Density(DensitySampler),
}

impl<'a> StartSampler<'a> {
    fn new(start: &Start<'a>) -> Self {
        match start {
            Start::Point(x) => StartSampler::Point(*x),
            Start::UniformOn(u) => StartSampler::Uniform(u, u.measure()),
            Start::FromDensity(f) => StartSampler::Density(DensitySampler::new(f)),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            StartSampler::Point(x) => *x,
            StartSampler::Uniform(u, total) => {
                let mut target = rng.random::<f64>() * *total;
                for part in u.parts() {
                    if target <= part.len() {
                        return part.lo + target;
                    }
                    target -= part.len();
                }
                u.parts().last().expect("nonempty union").hi
            }
            StartSampler::Density(d) => d.draw(rng.random()),
        }
    }
}

/// One hitting-time sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitRecord {
    pub hit_target: bool,
    pub n_jumps: u64,
    /// Continuous time on the sped-up clock at entry.
    pub time: f64,
}

/// Samples of the first entry into `target ∪ avoid`.
#[derive(Debug, Clone)]
pub struct HittingStats {
    pub samples: Vec<HitRecord>,
    pub cap_exceeded: usize,
}

/// Runs `n_samples` independent paths until the first entry into `target`
/// or `avoid` (after at least one jump when `require_jump`), recording which
/// set was hit and when. Capped paths are counted, not returned.
#[allow(clippy::too_many_arguments)]
pub fn hitting_stats(
    system: &PerturbedSystem,
    start: Start<'_>,
    target: &IntervalUnion,
    avoid: &IntervalUnion,
    require_jump: bool,
    n_samples: usize,
    seed: u64,
) -> Result<HittingStats, MapError> {
    for t in target.parts() {
        for a in avoid.parts() {
            assert!(
                t.overlap_len(a) == 0.0,
                "target and avoid sets must be disjoint"
            );
        }
    }
    let sampler = StartSampler::new(&start);
    let results: Result<Vec<Option<HitRecord>>, MapError> = (0..n_samples)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let mut x = sampler.draw(&mut rng);
            let mut t = 0.0;
            if !require_jump {
                if target.contains_closed(x) {
                    return Ok(Some(HitRecord {
                        hit_target: true,
                        n_jumps: 0,
                        time: 0.0,
                    }));
                }
                if avoid.contains_closed(x) {
                    return Ok(Some(HitRecord {
                        hit_target: false,
                        n_jumps: 0,
                        time: 0.0,
                    }));
                }
            }
            for n in 1..=STEP_CAP {
                t += system.holding_time(&mut rng);
                x = step_chain(system, x, &mut rng)?;
                if target.contains_closed(x) {
                    return Ok(Some(HitRecord {
                        hit_target: true,
                        n_jumps: n,
                        time: t,
                    }));
                }
                if avoid.contains_closed(x) {
                    return Ok(Some(HitRecord {
                        hit_target: false,
                        n_jumps: n,
                        time: t,
                    }));
                }
            }
            Ok(None)
        })
        .collect();
    let results = results?;
    let cap_exceeded = results.iter().filter(|r| r.is_none()).count();
    Ok(HittingStats {
        samples: results.into_iter().flatten().collect(),
        cap_exceeded,
    })
}

/// Escape-time samples: the first entry into any *other* well.
#[derive(Debug, Clone)]
pub struct EscapeSample {
    pub times: Vec<f64>,
    pub cap_exceeded: usize,
}

/// Samples the continuous escape time from well `i` (first entry into the
/// union of the other wells) on the sped-up clock.
pub fn sample_escape_times(
    system: &PerturbedSystem,
    wells: &WellStructure,
    i: WellId,
    n_samples: usize,
    seed: u64,
    start: Start<'_>,
) -> Result<EscapeSample, MapError> {
    let target = wells.other_wells(i);
    let stats = hitting_stats(
        system,
        start,
        &target,
        &IntervalUnion::empty(),
        false,
        n_samples,
        seed,
    )?;
    Ok(EscapeSample {
        times: stats.samples.iter().map(|s| s.time).collect(),
        cap_exceeded: stats.cap_exceeded,
    })
}

/// A jump path reduced to well occupancy: time in the holes is excised,
/// consecutive same-well segments are merged.
#[derive(Debug, Clone)]
pub struct OrderPath {
    pub segments: Vec<(WellId, f64)>,
    pub excised_time: f64,
    pub horizon: f64,
}

fn well_of(wells: &WellStructure, x: f64) -> Option<WellId> {
    (1..=wells.kappa())
        .map(WellId)
        .find(|&i| wells.well(i).contains_closed(x))
}

/// Extracts the order path: which well the jump process occupies, for how
/// long, with hole time excised exactly (the trajectory is piecewise
/// constant, so the time change is a finite sum).
pub fn trace_and_order(path: &JumpPath, wells: &WellStructure) -> OrderPath {
    assert!(!path.states.is_empty());
    let mut segments: Vec<(WellId, f64)> = Vec::new();
    let mut excised = 0.0;
    for (&x, dwell) in path.states.iter().zip(path.dwell_times()) {
        if dwell <= 0.0 {
            continue;
        }
        match well_of(wells, x) {
            None => excised += dwell,
            Some(i) => match segments.last_mut() {
                Some(last) if last.0 == i => last.1 += dwell,
                _ => segments.push((i, dwell)),
            },
        }
    }
    OrderPath {
        segments,
        excised_time: excised,
        horizon: path.horizon,
    }
}

/// Monte Carlo estimate of the transition rates `θ(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateEstimate {
    pub kappa: usize,
    /// `theta_hat[i-1][j-1] = β × (fraction of starts in well i whose first
    /// well entered after ≥ 1 jump is j ≠ i)`; diagonal 0.
    pub theta_hat: Vec<Vec<f64>>,
    /// Binomial-proportion standard errors scaled by β.
    pub std_err: Vec<Vec<f64>>,
    pub n_samples: usize,
    pub beta_used: f64,
    pub cap_exceeded: usize,
}

/// Estimates all rates: for each well, draws starts from the stationary
/// density conditioned to the well, simulates to the first well entered
/// after at least one jump, and tallies cross-entries.
pub fn estimate_rates(
    system: &PerturbedSystem,
    wells: &WellStructure,
    stationary: &GridFunction,
    n_samples: usize,
    seed: u64,
) -> Result<RateEstimate, MapError> {
    let kappa = wells.kappa();
    let beta = system.beta;
    let grid = stationary.grid();
    let mut theta_hat = vec![vec![0.0; kappa]; kappa];
    let mut std_err = vec![vec![0.0; kappa]; kappa];
    let mut cap_exceeded = 0;

    for i in 1..=kappa {
        let well_i = wells.well(WellId(i));
        // stationary conditioned to E_i: mask cells by midpoint membership
        let masked = GridFunction::from_fn(grid, |x| {
            if well_i.contains_closed(x) {
                stationary.eval(x).max(0.0)
            } else {
                0.0
            }
        });
        let sampler = DensitySampler::new(&masked);
        let outcomes: Result<Vec<Option<usize>>, MapError> = (0..n_samples)
            .into_par_iter()
            .map(|idx| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((i as u64) << 32) | idx as u64);
                let mut x = sampler.draw(rng.random());
                for _ in 0..STEP_CAP {
                    x = step_chain(system, x, &mut rng)?;
                    if let Some(j) = well_of(wells, x) {
                        return Ok(Some(j.0));
                    }
                }
                Ok(None)
            })
            .collect();
        let outcomes = outcomes?;
        let capped = outcomes.iter().filter(|o| o.is_none()).count();
        cap_exceeded += capped;
        let effective = n_samples - capped;
        for j in 1..=kappa {
            if j == i {
                continue;
            }
            let count = outcomes.iter().flatten().filter(|&&w| w == j).count();
            let p = count as f64 / effective as f64;
            theta_hat[i - 1][j - 1] = beta * p;
            std_err[i - 1][j - 1] = beta * (p * (1.0 - p) / effective as f64).sqrt();
        }
    }
    Ok(RateEstimate {
        kappa,
        theta_hat,
        std_err,
        n_samples,
        beta_used: beta,
        cap_exceeded,
    })
}

/// One- and two-jump crossing weights from deterministic quadrature.
#[derive(Debug, Clone, Copy)]
pub struct PathWeights {
    /// `∫_{E_i} p(x) · P[x jumps into I_j] dx`.
    pub one_jump: f64,
    /// `∫_{E_i} ∫_{Δ_{i,j}} p(x₀) k(x₀, x₁) · P[x₁ jumps into I_j] dx₁ dx₀`.
    pub two_jump: f64,
}

impl PathWeights {
    /// The implied rate estimate `β (one + two) / μ(E_i)`.
    pub fn theta(&self, beta: f64, mass_i: f64) -> f64 {
        beta * (self.one_jump + self.two_jump) / mass_i
    }
}

/// The exact probability that one step from `x` lands in `target`.
fn cross_mass(system: &PerturbedSystem, x: f64, target: &Interval) -> Result<f64, MapError> {
    let t = system.scenario.map.eval(x)?;
    let law = system.noise.region_at(x)?.law;
    Ok((law.cdf(target.hi - t) - law.cdf(target.lo - t)).max(0.0))
}

/// Midpoint nodes over `iv`, split at the given breakpoints, with spacing
/// at most `max_h`. Returns `(node, weight)` pairs.
fn quad_nodes(iv: &Interval, breaks: &[f64], max_h: f64) -> Vec<(f64, f64)> {
    let mut cuts = vec![iv.lo];
    cuts.extend(
        breaks
            .iter()
            .copied()
            .filter(|&c| c > iv.lo && c < iv.hi),
    );
    cuts.push(iv.hi);
    cuts.sort_by(f64::total_cmp);
    let mut nodes = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a <= 1e-15 {
            continue;
        }
        let m = ((b - a) / max_h).ceil().max(1.0) as usize;
        let step = (b - a) / m as f64;
        for k in 0..m {
            nodes.push((a + (k as f64 + 0.5) * step, step));
        }
    }
    nodes
}

/// Deterministic quadrature of the one-jump and two-jump path weights for
/// the crossing `i → j`, against the stationary density `p`.
pub fn path_weight_quadrature(
    system: &PerturbedSystem,
    wells: &WellStructure,
    stationary: &GridFunction,
    i: WellId,
    j: WellId,
) -> Result<PathWeights, SimError> {
    let map = &system.scenario.map;
    if !map.adjacent(i, j)? {
        return Err(SimError::NonAdjacent(i, j));
    }
    let target = map.component(j)?.interval();
    let eps = system.noise.epsilon();
    let eq = eps.powf(system.noise.exponent_q());
    let max_slope = map
        .components()
        .iter()
        .flat_map(|c| c.branches())
        .map(|b| b.slope().abs())
        .fold(1.0, f64::max);
    // resolve the crossing windows (width ≈ min(ε, εᑫ)/slope) comfortably
    let max_h = (eps.min(eq) / (16.0 * max_slope)).max(1e-7);
    let mut breaks: Vec<f64> = map
        .components()
        .iter()
        .flat_map(|c| c.branches())
        .flat_map(|b| [b.domain().lo, b.domain().hi])
        .collect();
    breaks.extend(
        system
            .noise
            .regions()
            .iter()
            .flat_map(|r| [r.interval.lo, r.interval.hi]),
    );

    let hole = wells.hole(i, j);
    let hole_hull = hole.parts().iter().fold(None::<Interval>, |acc, p| {
        Some(match acc {
            None => *p,
            Some(h) => Interval::new(h.lo.min(p.lo), h.hi.max(p.hi)),
        })
    });
    let inner_nodes: Vec<(f64, f64)> = hole
        .parts()
        .iter()
        .flat_map(|p| quad_nodes(p, &breaks, max_h))
        .collect();

    let mut one_jump = 0.0;
    let mut two_jump = 0.0;
    for part in wells.well(i).parts() {
        for (x0, w0) in quad_nodes(part, &breaks, max_h) {
            let p0 = stationary.eval(x0).max(0.0);
            if p0 == 0.0 {
                continue;
            }
            one_jump += w0 * p0 * cross_mass(system, x0, &target)?;
            if let Some(hull) = hole_hull {
                let t0 = map.eval(x0)?;
                let law0 = system.noise.region_at(x0)?.law;
                let (lo, hi) = law0.support();
                // skip the inner integral when the one-step support cannot
                // reach the hole at all
                if t0 + hi < hull.lo || t0 + lo > hull.hi {
                    continue;
                }
                for &(x1, w1) in &inner_nodes {
                    let k01 = law0.density(x1 - t0);
                    if k01 > 0.0 {
                        two_jump += w0 * p0 * w1 * k01 * cross_mass(system, x1, &target)?;
                    }
                }
            }
        }
    }
    Ok(PathWeights { one_jump, two_jump })
}

/// Empirical probability that a Gamma-distributed total of `n` holding
/// times deviates from its mean by more than half: `P[|β·H − n| > n/2]`
/// over `draws` independent totals. Bounded by `4/n` (Chebyshev).
pub fn gamma_concentration(system: &PerturbedSystem, n: usize, draws: usize, seed: u64) -> f64 {
    let beta = system.beta;
    let exceed: usize = (0..draws)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let h: f64 = (0..n)
                .map(|_| -(1.0 - rng.random::<f64>()).ln() / beta)
                .sum();
            usize::from((beta * h - n as f64).abs() > n as f64 / 2.0)
        })
        .sum();
    exceed as f64 / draws as f64
}

/// Kolmogorov–Smirnov distance of the mean-normalized sample to the unit
/// exponential law.
pub fn ks_exponential(times: &[f64]) -> f64 {
    assert!(!times.is_empty());
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    assert!(mean > 0.0);
    let mut normalized: Vec<f64> = times.iter().map(|&t| t / mean).collect();
    normalized.sort_by(f64::total_cmp);
    let n = normalized.len() as f64;
    let mut d: f64 = 0.0;
    for (k, &x) in normalized.iter().enumerate() {
        let cdf = 1.0 - (-x).exp();
        d = d.max((cdf - k as f64 / n).abs());
        d = d.max(((k + 1) as f64 / n - cdf).abs());
    }
    d
}

/// Support-growth verification for component `i`.
#[derive(Debug, Clone, Copy)]
pub struct SupportGrowth {
    /// `⌈Leb(T(I_i)) / min(ε, εᑫ)⌉`.
    pub n_formula: usize,
    /// Steps the iterated interval growth actually needed from the seed.
    pub n_observed: usize,
}

/// Evaluates the support-growth step count and verifies it by iterating
/// `J ↦ (best branch image of J ⊕ noise support) ∩ T(I_i)` from `seed_cell`
/// until the image interval is covered.
pub fn support_growth_steps(
    system: &PerturbedSystem,
    i: WellId,
    seed_cell: Interval,
) -> Result<SupportGrowth, SimError> {
    let comp = system.scenario.map.component(i)?;
    let hull = comp.image();
    let eps = system.noise.epsilon();
    let eq = eps.powf(system.noise.exponent_q());
    let min_width = eps.min(eq);
    let ratio = hull.len() / min_width;
    let n_formula = (ratio - 1e-9).ceil().max(1.0) as usize;

    // branch pieces with their regional noise offsets
    let mut pieces = Vec::new();
    for b in comp.branches() {
        for r in system.noise.regions() {
            let Some(dom) = b.domain().intersect(&r.interval) else {
                continue;
            };
            if dom.is_degenerate() {
                continue;
            }
            let (lo, hi) = r.law.support();
            pieces.push((dom, *b, lo, hi));
        }
    }

    let mut j = seed_cell.intersect(&hull).unwrap_or(hull);
    let covered =
        |j: &Interval| j.lo <= hull.lo + 1e-12 && j.hi >= hull.hi - 1e-12;
    let mut n_observed = 0;
    for step in 1..=n_formula {
        if covered(&j) {
            break;
        }
        let mut best: Option<Interval> = None;
        for (dom, b, lo, hi) in &pieces {
            let Some(k) = j.intersect(dom) else { continue };
            if k.is_degenerate() {
                continue;
            }
            let ya = b.eval(k.lo);
            let yb = b.eval(k.hi);
            let grown = Interval::new(ya.min(yb) + lo, ya.max(yb) + hi);
            let Some(clipped) = grown.intersect(&hull) else {
                continue;
            };
            if best.is_none_or(|cur| clipped.len() > cur.len()) {
                best = Some(clipped);
            }
        }
        match best {
            Some(next) => j = next,
            None => return Err(SimError::CoverageFailure(i)),
        }
        n_observed = step;
    }
    if !covered(&j) {
        return Err(SimError::CoverageFailure(i));
    }
    Ok(SupportGrowth {
        n_formula,
        n_observed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;
    use crate::ulam;
    use crate::wells::{build_wells, DeltaMatrix};
    use approx::assert_abs_diff_eq;

    fn two_well_system(b: f64, eps: f64, q: f64) -> PerturbedSystem {
        PerturbedSystem::new(scenarios::two_well(b), eps, q).unwrap()
    }

    fn two_well_wells(b: f64, eps: f64, delta: f64) -> WellStructure {
        let map = scenarios::two_well(b).map;
        let deltas = DeltaMatrix::uniform_adjacent(&map, delta).unwrap();
        build_wells(&map, eps, &deltas).unwrap()
    }

    #[test]
    fn restricted_and_full_steps_couple_exactly() {
        // q = 1.5 keeps fold windows wide enough to be sampled
        let s = scenarios::two_well(0.05);
        let noise = s.noise_model(0.04, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut folds = 0u32;
        let mut crossings = 0u32;
        for _ in 0..100_000 {
            let x = rng.random::<f64>() * 0.5;
            let sigma0 = noise.master_draw(rng.random());
            let full = s.map.eval(x).unwrap() + noise.offset_at(x, sigma0).unwrap();
            let step = s.restricted_step(WellId(1), x, sigma0).unwrap();
            if full > 0.0 && full < 0.5 {
                assert_eq!(step.value.to_bits(), full.to_bits(), "coupling must be exact");
                assert!(!step.folded);
            } else {
                folds += 1;
            }
            if full >= 0.5 && sigma0 > 0.0 {
                crossings += 1;
            }
        }
        assert!(folds > 0, "expected some fold activations at this ε");
        assert_eq!(
            folds, crossings,
            "every fold must come from a positive draw pushing past the boundary"
        );
    }

    #[test]
    fn jump_counts_follow_the_clock_rate() {
        let system = two_well_system(0.05, 0.04, 3.0);
        let expected = 20.0;
        let horizon = expected / system.beta;
        let n_paths = 1000;
        let total: u64 = (0..n_paths)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                rng.set_stream(k);
                (run_jump_path(&system, 0.2, horizon, &mut rng)
                    .unwrap()
                    .states
                    .len()
                    - 1) as u64
            })
            .sum();
        let mean = total as f64 / n_paths as f64;
        let three_sigma = 3.0 * (expected / n_paths as f64).sqrt();
        assert!(
            (mean - expected).abs() < three_sigma,
            "mean jump count {mean} vs Poisson mean {expected}"
        );
    }

    #[test]
    fn tiny_horizon_gives_single_state_path() {
        let system = two_well_system(0.05, 0.04, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let path = run_jump_path(&system, 0.2, 1e-9 / system.beta, &mut rng).unwrap();
        assert_eq!(path.states.len(), 1);
        assert_eq!(path.jump_times, vec![0.0]);
    }

    #[test]
    fn trace_and_order_excises_hole_time() {
        let wells = two_well_wells(0.05, 0.04, 0.004);
        // dwell 2.0 deep in well 1, 0.5 inside the hole at the first peak,
        // 1.0 deep in well 2
        let path = JumpPath {
            states: vec![0.22, 0.125, 0.72],
            jump_times: vec![0.0, 2.0, 2.5],
            horizon: 3.5,
        };
        let order = trace_and_order(&path, &wells);
        assert_eq!(order.segments.len(), 2);
        assert_eq!(order.segments[0].0, WellId(1));
        assert_abs_diff_eq!(order.segments[0].1, 2.0);
        assert_eq!(order.segments[1].0, WellId(2));
        assert_abs_diff_eq!(order.segments[1].1, 1.0);
        assert_abs_diff_eq!(order.excised_time, 0.5);
    }

    #[test]
    fn order_path_times_account_for_the_horizon() {
        let system = two_well_system(0.12, 0.1, 1.5);
        let wells = two_well_wells(0.12, 0.1, 0.033);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let horizon = 500.0 / system.beta;
        let path = run_jump_path(&system, 0.2, horizon, &mut rng).unwrap();
        let order = trace_and_order(&path, &wells);
        let occupied: f64 = order.segments.iter().map(|&(_, d)| d).sum();
        assert_abs_diff_eq!(occupied + order.excised_time, horizon, epsilon = 1e-9);
        for w in order.segments.windows(2) {
            assert_ne!(w[0].0, w[1].0, "merged segments must alternate wells");
        }
    }

    #[test]
    fn occupation_fractions_match_stationary_mass() {
        let system = two_well_system(0.12, 0.1, 1.5);
        let wells = two_well_wells(0.12, 0.1, 0.033);
        let kernel = system.scenario.kernel(0.1, 1.5).unwrap();
        let op = ulam::build_perturbed(&kernel, 512, 32).unwrap();
        let stationary = ulam::stationary_density(&op, 1e-11).unwrap();
        let mass1 = stationary.integral_over(wells.well(WellId(1)));
        let mass2 = stationary.integral_over(wells.well(WellId(2)));
        let expected = mass1 / (mass1 + mass2);

        let n_batches = 30;
        let batch_jumps = 10_000.0;
        let horizon = batch_jumps / system.beta;
        let mut fractions = Vec::new();
        let mut x0 = 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..n_batches {
            let path = run_jump_path(&system, x0, horizon, &mut rng).unwrap();
            x0 = *path.states.last().unwrap();
            let order = trace_and_order(&path, &wells);
            let in1: f64 = order
                .segments
                .iter()
                .filter(|&&(i, _)| i == WellId(1))
                .map(|&(_, d)| d)
                .sum();
            let occupied: f64 = order.segments.iter().map(|&(_, d)| d).sum();
            fractions.push(in1 / occupied);
        }
        let mean = fractions.iter().sum::<f64>() / n_batches as f64;
        let var = fractions
            .iter()
            .map(|f| (f - mean).powi(2))
            .sum::<f64>()
            / (n_batches - 1) as f64;
        let se = (var / n_batches as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * se + 0.01,
            "occupation {mean} vs stationary {expected} (se {se})"
        );
    }

    #[test]
    fn hitting_from_inside_target_is_instant() {
        let system = two_well_system(0.05, 0.04, 3.0);
        let target = IntervalUnion::singleton(Interval::new(0.1, 0.3));
        let stats = hitting_stats(
            &system,
            Start::Point(0.2),
            &target,
            &IntervalUnion::empty(),
            false,
            10,
            3,
        )
        .unwrap();
        assert_eq!(stats.samples.len(), 10);
        for s in &stats.samples {
            assert!(s.hit_target);
            assert_eq!(s.n_jumps, 0);
            assert_eq!(s.time, 0.0);
        }
    }

    #[test]
    fn escape_times_look_exponential_and_consistent() {
        let b = 0.05;
        let (eps, q) = (0.05, 1.8);
        let system = two_well_system(b, eps, q);
        let wells = two_well_wells(b, eps, 0.005);
        let kernel = system.scenario.kernel(eps, q).unwrap();
        let op = ulam::build_perturbed(&kernel, 512, 32).unwrap();
        let stationary = ulam::stationary_density(&op, 1e-11).unwrap();

        // escape starts must be conditioned to the well being left
        let well1 = wells.well(WellId(1));
        let conditioned = GridFunction::from_fn(stationary.grid(), |x| {
            if well1.contains_closed(x) {
                stationary.eval(x).max(0.0)
            } else {
                0.0
            }
        });

        let n = 2000;
        let escapes = sample_escape_times(
            &system,
            &wells,
            WellId(1),
            n,
            101,
            Start::FromDensity(&conditioned),
        )
        .unwrap();
        assert_eq!(escapes.cap_exceeded, 0);
        let mean = escapes.times.iter().sum::<f64>() / n as f64;

        // mean escape time × total outgoing rate ≈ 1
        let rates = estimate_rates(&system, &wells, &stationary, n, 707).unwrap();
        let theta_total = rates.theta_hat[0][1];
        let rel_err = rates.std_err[0][1] / theta_total;
        let product = mean * theta_total;
        assert!(
            (product - 1.0).abs() <= 3.0 * rel_err + 0.1,
            "mean {mean} × rate {theta_total} = {product}"
        );

        // starting-point insensitivity
        let from_point = sample_escape_times(
            &system,
            &wells,
            WellId(1),
            n,
            202,
            Start::Point(0.3),
        )
        .unwrap();
        let mean_pt = from_point.times.iter().sum::<f64>() / n as f64;
        let se = mean / (n as f64).sqrt();
        assert!(
            (mean - mean_pt).abs() <= 3.0 * 2.0 * se,
            "uniform-start mean {mean} vs point-start mean {mean_pt}"
        );

        // mean-normalized sample close to the unit exponential
        let d = ks_exponential(&escapes.times);
        assert!(d < 0.05, "KS distance {d}");
    }

    #[test]
    fn two_well_rates_are_symmetric() {
        let (eps, q) = (0.05, 1.5);
        let system = two_well_system(0.05, eps, q);
        // δ < ε^q ≈ 0.0112 so the wells retain states that can cross directly
        let wells = two_well_wells(0.05, eps, 0.005);
        let kernel = system.scenario.kernel(eps, q).unwrap();
        let op = ulam::build_perturbed(&kernel, 512, 32).unwrap();
        let stationary = ulam::stationary_density(&op, 1e-11).unwrap();
        let est = estimate_rates(&system, &wells, &stationary, 20_000, 31).unwrap();
        assert_eq!(est.theta_hat[0][0], 0.0);
        assert_eq!(est.theta_hat[1][1], 0.0);
        let (t12, t21) = (est.theta_hat[0][1], est.theta_hat[1][0]);
        let band = 3.0 * (est.std_err[0][1] + est.std_err[1][0]);
        assert!(t12 > 0.0, "no crossings observed");
        assert!(
            (t12 - t21).abs() <= band,
            "θ(1,2) = {t12}, θ(2,1) = {t21}, 3σ band {band}"
        );
    }

    #[test]
    fn three_well_rates_forbid_long_jumps() {
        let (eps, q) = (0.03, 1.4);
        let scenario = scenarios::three_well();
        let system = PerturbedSystem::new(scenario.clone(), eps, q).unwrap();
        // δ < ε^q ≈ 0.0074 so direct well-to-well crossings stay possible
        let deltas = DeltaMatrix::uniform_adjacent(&scenario.map, 0.004).unwrap();
        let wells = build_wells(&scenario.map, eps, &deltas).unwrap();
        let kernel = scenario.kernel(eps, q).unwrap();
        let op = ulam::build_perturbed(&kernel, 768, 32).unwrap();
        let stationary = ulam::stationary_density(&op, 1e-11).unwrap();
        let est = estimate_rates(&system, &wells, &stationary, 8000, 59).unwrap();
        assert_eq!(est.theta_hat[0][2], 0.0, "θ(1,3) must have zero tallies");
        assert_eq!(est.theta_hat[2][0], 0.0, "θ(3,1) must have zero tallies");
        let (t12, t32) = (est.theta_hat[0][1], est.theta_hat[2][1]);
        let band = 3.0 * (est.std_err[0][1] + est.std_err[2][1]);
        assert!(t12 > 0.0, "no 1→2 crossings observed");
        assert!(
            (t12 - t32).abs() <= band,
            "θ(1,2) = {t12}, θ(3,2) = {t32}, band {band}"
        );
    }

    #[test]
    fn gamma_totals_concentrate() {
        let system = two_well_system(0.05, 0.04, 3.0);
        for n in [16, 64] {
            let p = gamma_concentration(&system, n, 10_000, 13);
            assert!(
                p <= 4.0 / n as f64,
                "concentration failure at n = {n}: {p}"
            );
        }
    }

    #[test]
    fn quadrature_rate_matches_monte_carlo() {
        let (eps, q) = (0.05, 1.5);
        let system = two_well_system(0.05, eps, q);
        // δ < ε^q: both the direct and the through-the-hole path carry mass
        let wells = two_well_wells(0.05, eps, 0.005);
        let kernel = system.scenario.kernel(eps, q).unwrap();
        let op = ulam::build_perturbed(&kernel, 512, 32).unwrap();
        let stationary = ulam::stationary_density(&op, 1e-11).unwrap();

        let weights =
            path_weight_quadrature(&system, &wells, &stationary, WellId(1), WellId(2)).unwrap();
        assert!(weights.one_jump > 0.0);
        assert!(weights.two_jump > 0.0);
        let mass1 = stationary.integral_over(wells.well(WellId(1)));
        let theta_quad = weights.theta(system.beta, mass1);

        let est = estimate_rates(&system, &wells, &stationary, 20_000, 97).unwrap();
        let theta_mc = est.theta_hat[0][1];
        let band = 3.0 * est.std_err[0][1];
        assert!(
            (theta_quad - theta_mc).abs() <= band,
            "quadrature {theta_quad} vs Monte Carlo {theta_mc} (band {band})"
        );
    }

    #[test]
    fn non_adjacent_pair_is_rejected() {
        let (eps, q) = (0.02, 3.0);
        let scenario = scenarios::three_well();
        let system = PerturbedSystem::new(scenario.clone(), eps, q).unwrap();
        let deltas = DeltaMatrix::uniform_adjacent(&scenario.map, 0.004).unwrap();
        let wells = build_wells(&scenario.map, eps, &deltas).unwrap();
        let stationary = GridFunction::uniform_density(crate::grid::Grid::new(
            Interval::new(0.0, 1.0),
            256,
        ));
        assert!(matches!(
            path_weight_quadrature(&system, &wells, &stationary, WellId(1), WellId(3)),
            Err(SimError::NonAdjacent(_, _))
        ));
    }

    #[test]
    fn support_growth_formula_and_coverage() {
        // min noise width 10⁻³ against image length 0.45
        let system = two_well_system(0.05, 0.1, 3.0);
        let seed_cell = Interval::new(0.2, 0.201);
        let growth = support_growth_steps(&system, WellId(1), seed_cell).unwrap();
        assert_eq!(growth.n_formula, 450);
        assert!(growth.n_observed <= growth.n_formula);

        // symmetric support widths (q = 1): 0.45 / 0.1 rounds up to 5
        let symmetric = two_well_system(0.05, 0.1, 1.0);
        let growth = support_growth_steps(&symmetric, WellId(1), seed_cell).unwrap();
        assert_eq!(growth.n_formula, 5);
        assert!(growth.n_observed <= 5);

        // several seed cells must all reach coverage within the formula count
        let tight = two_well_system(0.05, 0.04, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let mid = 0.05 + rng.random::<f64>() * 0.44;
            let w = 6.4e-5;
            let growth =
                support_growth_steps(&tight, WellId(1), Interval::new(mid, mid + w)).unwrap();
            assert!(growth.n_observed <= growth.n_formula);
        }
    }

    #[test]
    fn samplers_are_reproducible() {
        let (eps, q) = (0.05, 1.5);
        let system = two_well_system(0.05, eps, q);
        let wells = two_well_wells(0.05, eps, 0.012);
        let kernel = system.scenario.kernel(eps, q).unwrap();
        let op = ulam::build_perturbed(&kernel, 256, 32).unwrap();
        let stationary = ulam::stationary_density(&op, 1e-11).unwrap();
        let a = estimate_rates(&system, &wells, &stationary, 500, 11).unwrap();
        let b = estimate_rates(&system, &wells, &stationary, 500, 11).unwrap();
        assert_eq!(a, b, "same seed must reproduce estimates bitwise");
        let e1 = sample_escape_times(&system, &wells, WellId(1), 200, 4, Start::Point(0.25))
            .unwrap();
        let e2 = sample_escape_times(&system, &wells, WellId(1), 200, 4, Start::Point(0.25))
            .unwrap();
        assert_eq!(e1.times, e2.times);
    }

    #[test]
    fn chain_stays_in_ambient_for_confined_noise() {
        let system = two_well_system(0.05, 0.04, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut x = 0.3;
        for _ in 0..10_000 {
            x = step_chain(&system, x, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&x), "state {x} escaped the ambient");
        }
    }
}
