//! Additive noise models with region-dependent asymmetry.
//!
//! A noise model attaches to each region of the ambient interval a law for
//! the additive offset applied after the deterministic map. All regions are
//! driven by one master draw per time step: a region either takes the master
//! value (`flip = false`) or its negation (`flip = true`), so offsets in
//! different regions are perfectly anticorrelated while keeping the marginal
//! law declared for each region. The flagship laws are the asymmetric
//! uniforms `U(−ε, ε^q)` / `U(−ε^q, ε)`: the long side pushes the state back
//! into its component, the short `ε^q` side is the only way out.

use crate::geometry::Interval;
use crate::maps::{MapError, PiecewiseLinearMap, WellId, DOMAIN_TOL};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("noise regions must tile the ambient interval: {0}")]
    RegionsDontPartition(String),
    #[error("invalid noise law: {0}")]
    InvalidLaw(String),
    #[error(
        "noise support exits the ambient interval: region [{region_lo}, {region_hi}] \
         maps to [{image_lo}, {image_hi}] plus offsets [{off_lo}, {off_hi}]"
    )]
    SupportExceedsDomain {
        region_lo: f64,
        region_hi: f64,
        image_lo: f64,
        image_hi: f64,
        off_lo: f64,
        off_hi: f64,
    },
    #[error("regions are not sign-flip coupled: {0}")]
    IncoherentCoupling(String),
}

/// Standard normal CDF.
fn phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Law of the additive offset, supported on a bounded interval of offsets
/// relative to the deterministic image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseLaw {
    /// Uniform on `[lo, hi]`, typically asymmetric around zero.
    UniformAsym { lo: f64, hi: f64 },
    /// Gaussian restricted (and renormalized) to `[lo, hi]`.
    TruncGaussian { mean: f64, sd: f64, lo: f64, hi: f64 },
}

impl NoiseLaw {
    pub fn support(&self) -> (f64, f64) {
        match *self {
            NoiseLaw::UniformAsym { lo, hi } => (lo, hi),
            NoiseLaw::TruncGaussian { lo, hi, .. } => (lo, hi),
        }
    }

    fn check(&self) -> Result<(), NoiseError> {
        let (lo, hi) = self.support();
        if !(lo < hi) {
            return Err(NoiseError::InvalidLaw(format!(
                "support [{lo}, {hi}] is empty"
            )));
        }
        if let NoiseLaw::TruncGaussian { sd, .. } = self {
            if !(*sd > 0.0) {
                return Err(NoiseError::InvalidLaw("sd must be positive".into()));
            }
        }
        Ok(())
    }

    /// Probability that the truncation interval hits, before renormalizing.
    fn trunc_mass(&self) -> f64 {
        match *self {
            NoiseLaw::UniformAsym { .. } => 1.0,
            NoiseLaw::TruncGaussian { mean, sd, lo, hi } => {
                phi((hi - mean) / sd) - phi((lo - mean) / sd)
            }
        }
    }

    pub fn density(&self, t: f64) -> f64 {
        let (lo, hi) = self.support();
        if t < lo || t > hi {
            return 0.0;
        }
        match *self {
            NoiseLaw::UniformAsym { lo, hi } => 1.0 / (hi - lo),
            NoiseLaw::TruncGaussian { mean, sd, .. } => {
                let z = (t - mean) / sd;
                let norm = (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
                norm / self.trunc_mass()
            }
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        let (lo, hi) = self.support();
        if t <= lo {
            return 0.0;
        }
        if t >= hi {
            return 1.0;
        }
        match *self {
            NoiseLaw::UniformAsym { lo, hi } => (t - lo) / (hi - lo),
            NoiseLaw::TruncGaussian { mean, sd, lo, .. } => {
                (phi((t - mean) / sd) - phi((lo - mean) / sd)) / self.trunc_mass()
            }
        }
    }

    /// Quantile function; `u ∈ [0, 1)`.
    pub fn inverse_cdf(&self, u: f64) -> f64 {
        debug_assert!((0.0..1.0).contains(&u));
        match *self {
            NoiseLaw::UniformAsym { lo, hi } => lo + u * (hi - lo),
            NoiseLaw::TruncGaussian { lo, hi, .. } => {
                // bisection on the analytic CDF: 80 halvings reach full
                // f64 resolution and stay deterministic
                let (mut a, mut b) = (lo, hi);
                for _ in 0..80 {
                    let m = 0.5 * (a + b);
                    if self.cdf(m) < u {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                0.5 * (a + b)
            }
        }
    }

    /// Two-sided tail `P(|σ| > t)` for `t ≥ 0`, evaluated analytically.
    pub fn tail(&self, t: f64) -> f64 {
        debug_assert!(t >= 0.0);
        let below = self.cdf(-t);
        let above = 1.0 - self.cdf(t);
        (below + above).min(1.0)
    }

    /// Law of the negated offset.
    pub fn mirrored(&self) -> NoiseLaw {
        match *self {
            NoiseLaw::UniformAsym { lo, hi } => NoiseLaw::UniformAsym { lo: -hi, hi: -lo },
            NoiseLaw::TruncGaussian { mean, sd, lo, hi } => NoiseLaw::TruncGaussian {
                mean: -mean,
                sd,
                lo: -hi,
                hi: -lo,
            },
        }
    }
}

/// One region of the ambient interval with its offset law and its coupling
/// flag: `flip = true` regions receive the negated master draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRegion {
    pub interval: Interval,
    pub law: NoiseLaw,
    pub flip: bool,
}

/// Region-dependent additive noise, coupled through one master draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    epsilon: f64,
    exponent_q: f64,
    /// Sub-Gaussian diagnostic constants; not used by samplers.
    pub gamma1: f64,
    pub gamma2: f64,
    ambient: Interval,
    regions: Vec<NoiseRegion>,
    /// The law the master draw follows (= law of every unflipped region).
    master: NoiseLaw,
}

impl NoiseModel {
    /// Builds a model, checking that the regions tile the ambient interval
    /// and that every region law equals the master law up to the sign flip
    /// (the coupling is a pure sign pattern on one draw).
    pub fn new(
        ambient: Interval,
        epsilon: f64,
        exponent_q: f64,
        regions: Vec<NoiseRegion>,
    ) -> Result<Self, NoiseError> {
        if regions.is_empty() {
            return Err(NoiseError::RegionsDontPartition("no regions".into()));
        }
        if regions[0].interval.lo != ambient.lo
            || regions.last().unwrap().interval.hi != ambient.hi
        {
            return Err(NoiseError::RegionsDontPartition(
                "regions do not span the ambient interval".into(),
            ));
        }
        for w in regions.windows(2) {
            if w[0].interval.hi != w[1].interval.lo {
                return Err(NoiseError::RegionsDontPartition(format!(
                    "gap or overlap at {} vs {}",
                    w[0].interval.hi, w[1].interval.lo
                )));
            }
        }
        for r in &regions {
            r.law.check()?;
        }
        let master = regions
            .iter()
            .find(|r| !r.flip)
            .map(|r| r.law)
            .unwrap_or_else(|| regions[0].law.mirrored());
        for r in &regions {
            let expected = if r.flip { master.mirrored() } else { master };
            if r.law != expected {
                return Err(NoiseError::IncoherentCoupling(format!(
                    "region [{}, {}] declares {:?} but the sign pattern implies {:?}",
                    r.interval.lo, r.interval.hi, r.law, expected
                )));
            }
        }
        Ok(Self {
            epsilon,
            exponent_q,
            gamma1: 2.0,
            gamma2: 1.0,
            ambient,
            regions,
            master,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn exponent_q(&self) -> f64 {
        self.exponent_q
    }

    pub fn ambient(&self) -> Interval {
        self.ambient
    }

    pub fn regions(&self) -> &[NoiseRegion] {
        &self.regions
    }

    /// The region containing `x` under the half-open convention (last region
    /// closed on the right), mirroring branch-domain lookup.
    pub fn region_at(&self, x: f64) -> Result<&NoiseRegion, MapError> {
        let n = self.regions.len();
        self.regions
            .iter()
            .enumerate()
            .find(|(k, r)| {
                let hi_ok = if *k + 1 == n {
                    x <= r.interval.hi
                } else {
                    x < r.interval.hi
                };
                x >= r.interval.lo && hi_ok
            })
            .map(|(_, r)| r)
            .ok_or(MapError::OutOfDomain { x })
    }

    /// Master draw for a uniform seed `u ∈ [0, 1)`.
    pub fn master_draw(&self, u: f64) -> f64 {
        self.master.inverse_cdf(u)
    }

    /// Offset applied at `x` when the master draw is `sigma0`.
    pub fn offset_at(&self, x: f64, sigma0: f64) -> Result<f64, MapError> {
        let r = self.region_at(x)?;
        Ok(if r.flip { -sigma0 } else { sigma0 })
    }

    /// Coupled sample at `x` from the seed `u`: master inverse-CDF, then the
    /// region's sign. Same seed, same sign region ⇒ equal values; opposite
    /// sign regions ⇒ negated values.
    pub fn sample(&self, x: f64, u: f64) -> Result<f64, MapError> {
        self.offset_at(x, self.master_draw(u))
    }

    /// One-jump escape probability scale `q_ε = ε^q / (ε + ε^q)`.
    pub fn q_eps(&self) -> f64 {
        let eq = self.epsilon.powf(self.exponent_q);
        eq / (self.epsilon + eq)
    }

    /// Checks the sub-Gaussian tail bound
    /// `P(|σ| > t) ≤ γ₁ exp(−t²/(γ₂ ε²))` for every region law and every
    /// `t` in the grid, using exact tails.
    pub fn sub_gaussian_check(&self, gamma1: f64, gamma2: f64, t_grid: &[f64]) -> bool {
        t_grid.iter().all(|&t| {
            let bound = gamma1 * (-t * t / (gamma2 * self.epsilon * self.epsilon)).exp();
            self.regions.iter().all(|r| r.law.tail(t) <= bound)
        })
    }
}

/// The Markov transition kernel of the perturbed map: deterministic image
/// plus regional noise.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    pub map: PiecewiseLinearMap,
    pub noise: NoiseModel,
}

impl TransitionKernel {
    pub fn new(map: PiecewiseLinearMap, noise: NoiseModel) -> Self {
        Self { map, noise }
    }

    /// Checks that the noise can never push the state out of the ambient
    /// interval, so no truncation is ever needed and the densities stay
    /// exactly what the laws say. Simulation runs require this; pointwise
    /// kernel queries do not.
    pub fn ensure_confined(&self) -> Result<(), NoiseError> {
        for c in self.map.components() {
            for b in c.branches() {
                for r in self.noise.regions() {
                    let Some(overlap) = b.domain().intersect(&r.interval) else {
                        continue;
                    };
                    if overlap.is_degenerate() {
                        continue;
                    }
                    let va = b.eval(overlap.lo);
                    let vb = b.eval(overlap.hi);
                    let (im_lo, im_hi) = (va.min(vb), va.max(vb));
                    let (off_lo, off_hi) = r.law.support();
                    let amb = self.map.ambient();
                    if im_lo + off_lo < amb.lo - DOMAIN_TOL || im_hi + off_hi > amb.hi + DOMAIN_TOL
                    {
                        return Err(NoiseError::SupportExceedsDomain {
                            region_lo: overlap.lo,
                            region_hi: overlap.hi,
                            image_lo: im_lo,
                            image_hi: im_hi,
                            off_lo,
                            off_hi,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Transition density `ρ_ε(x, y)`: the law of `T(x) + σ` at `y`.
    pub fn density(&self, x: f64, y: f64) -> Result<f64, MapError> {
        let image = self.map.eval(x)?;
        let law = self.noise.region_at(x)?.law;
        Ok(law.density(y - image))
    }

    /// One canonical chain step from the uniform seed `u`.
    pub fn step(&self, x: f64, u: f64) -> Result<f64, MapError> {
        Ok(self.map.eval(x)? + self.noise.sample(x, u)?)
    }

    /// Exact supremum over `x` in the component of the probability that one
    /// step lands in a *different* component. The chain's state space is the
    /// union of the components, so this is the escape probability; mass that
    /// an unconfined model would push outside the ambient interval is a
    /// modelling defect reported by [`ensure_confined`](Self::ensure_confined),
    /// not an escape.
    ///
    /// For an affine branch piece the landing support `[c + lo, c + hi]`
    /// translates with the image value `c`, so the escape mass is piecewise
    /// affine in `c` with breakpoints where a support endpoint crosses a
    /// component boundary; the maximum over the piece is attained at the
    /// piece's image endpoints or at one of those interior breakpoints.
    pub fn escape_prob_sup(&self, id: WellId) -> Result<f64, MapError> {
        let comp = self.map.component(id)?;
        let others: Vec<Interval> = self
            .map
            .components()
            .iter()
            .filter(|c| c.id() != id)
            .map(|c| c.interval())
            .collect();
        let boundary_values: Vec<f64> = self
            .map
            .components()
            .iter()
            .flat_map(|c| [c.interval().lo, c.interval().hi])
            .collect();
        let mut sup: f64 = 0.0;
        for b in comp.branches() {
            for r in self.noise.regions() {
                let Some(overlap) = b.domain().intersect(&r.interval) else {
                    continue;
                };
                if overlap.is_degenerate() {
                    continue;
                }
                let (off_lo, off_hi) = r.law.support();
                let width = off_hi - off_lo;
                let escape_mass = |c: f64| -> f64 {
                    let support = Interval::new(c + off_lo, c + off_hi);
                    let hit: f64 = others.iter().map(|o| support.overlap_len(o)).sum();
                    (hit / width).min(1.0)
                };
                let va = b.eval(overlap.lo);
                let vb = b.eval(overlap.hi);
                let (c_lo, c_hi) = (va.min(vb), va.max(vb));
                sup = sup.max(escape_mass(c_lo)).max(escape_mass(c_hi));
                for &beta in &boundary_values {
                    for crossing in [beta - off_lo, beta - off_hi] {
                        if crossing > c_lo && crossing < c_hi {
                            sup = sup.max(escape_mass(crossing));
                        }
                    }
                }
            }
        }
        Ok(sup)
    }
}
