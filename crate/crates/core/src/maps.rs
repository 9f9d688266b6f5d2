//! Piecewise-affine interval maps with several invariant components.
//!
//! A map is a list of components (open subintervals whose closures tile the
//! ambient interval); each component carries an ordered list of affine
//! branches and is forward-invariant: the image of the component stays inside
//! its closure. The structural assumptions a map must satisfy (covering,
//! invariance, finitely many boundary preimages, inter-component reachability
//! through boundary contact, expansion, branch-image lengths) are checked by
//! [`PiecewiseLinearMap::validate`], which reports verdicts instead of
//! erroring so callers can inspect partial failures.
//!
//! Endpoint conventions: branch domains are half-open `[lo, hi)`, except the
//! last branch of each component which is closed on the right. Evaluation at
//! a junction shared by two branches uses the left branch (the scan takes the
//! first branch whose closed domain contains the point), which is the same
//! value whenever the map is continuous there and a fixed, documented choice
//! where it is not. All such ambiguity sets have zero Lebesgue measure.

use crate::geometry::{Interval, IntervalUnion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute slack used when assigning points to branch domains and when
/// deduplicating preimages; forward evaluation of any reported preimage
/// reproduces the query value within this tolerance.
pub const DOMAIN_TOL: f64 = 1e-12;

/// 1-based label of an invariant component (the well alphabet `{1, …, κ}`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WellId(pub usize);

impl WellId {
    /// Zero-based position for vector indexing.
    pub fn idx(self) -> usize {
        self.0 - 1
    }
}

impl std::fmt::Display for WellId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("point {x} is outside the map domain")]
    OutOfDomain { x: f64 },
    #[error("unknown component {0}")]
    UnknownComponent(WellId),
    #[error("invalid map structure: {0}")]
    InvalidStructure(String),
}

/// One affine branch `x ↦ slope·x + intercept` on a half-open domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    domain: Interval,
    slope: f64,
    intercept: f64,
    /// True for the last branch of a component: its right endpoint belongs
    /// to the domain.
    closed_right: bool,
}

impl Branch {
    /// Branch through the two endpoint graph points `(x_l, y_l)`, `(x_r, y_r)`.
    ///
    /// Building from graph points rather than slope/intercept keeps scenario
    /// definitions readable and the endpoint values exact.
    pub fn through(xl: f64, yl: f64, xr: f64, yr: f64) -> Self {
        assert!(xr > xl, "branch endpoints must be increasing");
        let slope = (yr - yl) / (xr - xl);
        Self {
            domain: Interval::new(xl, xr),
            slope,
            intercept: yl - slope * xl,
            closed_right: false,
        }
    }

    pub fn from_parts(domain: Interval, slope: f64, intercept: f64) -> Self {
        assert!(slope != 0.0, "branch slope must be nonzero");
        Self {
            domain,
            slope,
            intercept,
            closed_right: false,
        }
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    /// Image of the branch domain, as an ordered interval.
    pub fn image(&self) -> Interval {
        let a = self.eval(self.domain.lo);
        let b = self.eval(self.domain.hi);
        Interval::new(a.min(b), a.max(b))
    }

    /// Whether `x` belongs to the branch under the half-open convention
    /// (with the numerical slack `DOMAIN_TOL`).
    fn admits(&self, x: f64) -> bool {
        let hi_ok = if self.closed_right {
            x <= self.domain.hi + DOMAIN_TOL
        } else {
            x < self.domain.hi - DOMAIN_TOL
        };
        x >= self.domain.lo - DOMAIN_TOL && hi_ok
    }

    /// The unique solution of `eval(x) = y` inside the branch domain, if any.
    fn invert(&self, y: f64) -> Option<f64> {
        let x = (y - self.intercept) / self.slope;
        self.admits(x)
            .then(|| x.clamp(self.domain.lo, self.domain.hi))
    }

    /// Preimage of the interval `j` clipped to the branch domain. Solutions
    /// landing within `DOMAIN_TOL` of a domain endpoint are snapped onto it,
    /// so preimages taken across adjacent branches share their boundary point
    /// exactly instead of leaving one-ulp gaps.
    fn invert_interval(&self, j: &Interval) -> Option<Interval> {
        let snap = |x: f64| {
            if (x - self.domain.lo).abs() <= DOMAIN_TOL {
                self.domain.lo
            } else if (x - self.domain.hi).abs() <= DOMAIN_TOL {
                self.domain.hi
            } else {
                x
            }
        };
        let a = snap((j.lo - self.intercept) / self.slope);
        let b = snap((j.hi - self.intercept) / self.slope);
        Interval::new(a.min(b), a.max(b)).intersect(&self.domain)
    }
}

/// An invariant component: an open interval with its ordered branch list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    id: WellId,
    interval: Interval,
    branches: Vec<Branch>,
}

impl Component {
    pub fn new(id: WellId, interval: Interval, mut branches: Vec<Branch>) -> Self {
        if let Some(last) = branches.last_mut() {
            last.closed_right = true;
        }
        Self {
            id,
            interval,
            branches,
        }
    }

    pub fn id(&self) -> WellId {
        self.id
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Closure of the image `T(I_i)`.
    pub fn image(&self) -> Interval {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for b in &self.branches {
            let im = b.image();
            lo = lo.min(im.lo);
            hi = hi.max(im.hi);
        }
        Interval::new(lo, hi)
    }
}

/// Outcome of one structural assumption check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub id: String,
    pub passed: bool,
    pub detail: String,
}

/// Aggregated validation verdicts plus the two derived constants used by
/// the expansion estimates: the minimum absolute branch slope and the
/// minimum branch-image length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub checks: Vec<AssumptionCheck>,
    pub min_abs_slope: f64,
    pub min_branch_image_length: f64,
}

/// A piecewise-affine map of a closed interval with κ invariant components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinearMap {
    ambient: Interval,
    components: Vec<Component>,
}

impl PiecewiseLinearMap {
    /// Builds a map after checking basic well-formedness: components ordered
    /// and disjoint, branch domains tiling each component in order.
    ///
    /// The dynamical assumptions (invariance, expansion, …) are *not*
    /// enforced here — they belong to [`Self::validate`], which reports
    /// instead of failing, so intentionally broken maps can be constructed
    /// and inspected.
    pub fn new(
        ambient: Interval,
        components: Vec<Component>,
    ) -> Result<Self, MapError> {
        if components.is_empty() {
            return Err(MapError::InvalidStructure("no components".into()));
        }
        for (n, c) in components.iter().enumerate() {
            if c.id.0 != n + 1 {
                return Err(MapError::InvalidStructure(format!(
                    "component labels must be 1..κ in order, found {} at position {}",
                    c.id,
                    n + 1
                )));
            }
            if c.branches.is_empty() {
                return Err(MapError::InvalidStructure(format!(
                    "component {} has no branches",
                    c.id
                )));
            }
            let first = c.branches.first().unwrap();
            let last = c.branches.last().unwrap();
            if first.domain.lo != c.interval.lo || last.domain.hi != c.interval.hi {
                return Err(MapError::InvalidStructure(format!(
                    "branches of component {} do not span its interval",
                    c.id
                )));
            }
            for w in c.branches.windows(2) {
                if w[0].domain.hi != w[1].domain.lo {
                    return Err(MapError::InvalidStructure(format!(
                        "branch domains of component {} must abut: {} vs {}",
                        c.id, w[0].domain.hi, w[1].domain.lo
                    )));
                }
            }
        }
        for w in components.windows(2) {
            if w[0].interval.hi > w[1].interval.lo {
                return Err(MapError::InvalidStructure(
                    "components must be ordered and disjoint".into(),
                ));
            }
        }
        Ok(Self {
            ambient,
            components,
        })
    }

    pub fn ambient(&self) -> Interval {
        self.ambient
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn kappa(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, id: WellId) -> Result<&Component, MapError> {
        self.components
            .get(id.idx())
            .filter(|c| c.id == id)
            .ok_or(MapError::UnknownComponent(id))
    }

    /// The component whose closure contains `x`; at a shared boundary the
    /// left component wins, mirroring the evaluation convention.
    pub fn component_of(&self, x: f64) -> Option<WellId> {
        self.components
            .iter()
            .find(|c| c.interval.contains_closed(x))
            .map(|c| c.id)
    }

    /// Evaluates the map. The first branch (scanning components, then
    /// branches, left to right) whose closed domain contains `x` is used, so
    /// shared endpoints resolve to the left branch.
    pub fn eval(&self, x: f64) -> Result<f64, MapError> {
        if !self.ambient.contains_closed(x) {
            return Err(MapError::OutOfDomain { x });
        }
        self.components
            .iter()
            .flat_map(|c| c.branches.iter())
            .find(|b| b.domain.contains_closed(x))
            .map(|b| b.eval(x))
            .ok_or(MapError::OutOfDomain { x })
    }

    /// All solutions of `T(x) = y` within the named component, sorted. Each
    /// affine branch is inverted and filtered by its half-open domain, so
    /// every point of the fiber is reported exactly once.
    pub fn preimage(&self, y: f64, id: WellId) -> Result<Vec<f64>, MapError> {
        let comp = self.component(id)?;
        let mut out: Vec<f64> = comp.branches.iter().filter_map(|b| b.invert(y)).collect();
        out.sort_by(f64::total_cmp);
        out.dedup_by(|a, b| (*a - *b).abs() <= 10.0 * DOMAIN_TOL);
        Ok(out)
    }

    /// `T⁻¹(J) ∩ I_i` as a union of intervals, one per branch before
    /// normalization (so at most `branch count` pieces).
    pub fn preimage_of_interval(&self, j: &Interval, id: WellId) -> Result<IntervalUnion, MapError> {
        let comp = self.component(id)?;
        let parts = comp
            .branches
            .iter()
            .filter_map(|b| b.invert_interval(j))
            .collect();
        Ok(IntervalUnion::from_intervals(parts))
    }

    /// Fixed points of the map inside the component, sorted.
    pub fn fixed_points(&self, id: WellId) -> Result<Vec<f64>, MapError> {
        let comp = self.component(id)?;
        let mut out: Vec<f64> = comp
            .branches
            .iter()
            .filter(|b| b.slope != 1.0)
            .filter_map(|b| {
                let x = b.intercept / (1.0 - b.slope);
                b.admits(x).then_some(x)
            })
            .collect();
        out.sort_by(f64::total_cmp);
        out.dedup_by(|a, b| (*a - *b).abs() <= 10.0 * DOMAIN_TOL);
        Ok(out)
    }

    /// The points of `T⁻¹(∂I_i) ∩ I_i`: interior points of the component
    /// mapping onto its own boundary. These are where escapes become
    /// possible once noise is added.
    pub fn infinitesimal_holes(&self, id: WellId) -> Result<Vec<f64>, MapError> {
        let comp = self.component(id)?;
        let mut out = Vec::new();
        for boundary in [comp.interval.lo, comp.interval.hi] {
            for b in &comp.branches {
                if let Some(x) = b.invert(boundary) {
                    if comp.interval.contains_open(x) {
                        out.push(x);
                    }
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out.dedup_by(|a, b| (*a - *b).abs() <= 10.0 * DOMAIN_TOL);
        Ok(out)
    }

    /// Whether the closures of `I_i` and `I_j` share a boundary point.
    pub fn adjacent(&self, i: WellId, j: WellId) -> Result<bool, MapError> {
        let a = self.component(i)?.interval;
        let b = self.component(j)?.interval;
        Ok(i != j && (a.hi == b.lo || b.hi == a.lo))
    }

    /// Runs every structural check and reports per-assumption verdicts.
    pub fn validate(&self) -> ValidationReport {
        let mut checks = Vec::new();

        // Components pairwise disjoint, ordered, and essentially covering
        // the ambient interval (closures tile it).
        let mut covering = self.components[0].interval.lo == self.ambient.lo
            && self.components.last().unwrap().interval.hi == self.ambient.hi;
        for w in self.components.windows(2) {
            covering &= w[0].interval.hi == w[1].interval.lo;
        }
        checks.push(AssumptionCheck {
            id: "components-cover".into(),
            passed: covering,
            detail: format!(
                "{} component closures {} the ambient interval",
                self.kappa(),
                if covering { "tile" } else { "do not tile" }
            ),
        });

        // Forward invariance of each component closure.
        let mut invariant = true;
        let mut inv_detail = String::new();
        for c in &self.components {
            let im = c.image();
            let ok = im.lo >= c.interval.lo - DOMAIN_TOL && im.hi <= c.interval.hi + DOMAIN_TOL;
            invariant &= ok;
            if !ok {
                inv_detail = format!(
                    "component {} image [{}, {}] escapes [{}, {}]",
                    c.id, im.lo, im.hi, c.interval.lo, c.interval.hi
                );
            }
        }
        checks.push(AssumptionCheck {
            id: "component-invariance".into(),
            passed: invariant,
            detail: if invariant {
                "every component image stays inside its closure".into()
            } else {
                inv_detail
            },
        });

        // Finitely many interior boundary preimages, with at least one per
        // component (affine branches guarantee finiteness; zero would mean
        // the component can never leak and the escape analysis is vacuous).
        let mut holes_ok = true;
        let mut hole_detail = String::new();
        for c in &self.components {
            let pts = self.infinitesimal_holes(c.id).unwrap_or_default();
            if pts.is_empty() {
                holes_ok = false;
                hole_detail = format!("component {} has no interior boundary preimage", c.id);
            } else {
                hole_detail.push_str(&format!(
                    "component {}: {} point(s) at {:?}; ",
                    c.id,
                    pts.len(),
                    pts
                ));
            }
        }
        checks.push(AssumptionCheck {
            id: "boundary-preimages-finite".into(),
            passed: holes_ok,
            detail: hole_detail,
        });

        // Reachability: directed edge i → j when the image closure of I_i
        // touches the boundary of I_j; every ordered pair must be linked by
        // a chain, otherwise some well can never be reached from another.
        // Image endpoints are grown by the domain tolerance: an endpoint
        // meant to land exactly on a boundary can round one ulp short.
        let kappa = self.kappa();
        let mut reach = vec![vec![false; kappa]; kappa];
        for (i, ci) in self.components.iter().enumerate() {
            let im = ci.image().grow(DOMAIN_TOL, DOMAIN_TOL);
            for (j, cj) in self.components.iter().enumerate() {
                let b = cj.interval;
                reach[i][j] = im.contains_closed(b.lo) || im.contains_closed(b.hi);
            }
        }
        for m in 0..kappa {
            for i in 0..kappa {
                for j in 0..kappa {
                    reach[i][j] |= reach[i][m] && reach[m][j];
                }
            }
        }
        let connected = (0..kappa).all(|i| (0..kappa).all(|j| reach[i][j]));
        checks.push(AssumptionCheck {
            id: "components-reachable".into(),
            passed: connected,
            detail: if connected {
                "boundary-contact graph links every ordered component pair".into()
            } else {
                "some component pair has no boundary-contact chain".into()
            },
        });

        // Uniform expansion: minimum |slope| strictly above 2.
        let min_abs_slope = self
            .components
            .iter()
            .flat_map(|c| c.branches.iter())
            .map(|b| b.slope.abs())
            .fold(f64::INFINITY, f64::min);
        checks.push(AssumptionCheck {
            id: "min-slope-above-2".into(),
            passed: min_abs_slope > 2.0,
            detail: format!("min |slope| = {min_abs_slope}"),
        });

        // Branch images have positive length, bounded below by ℓ.
        let min_image = self
            .components
            .iter()
            .flat_map(|c| c.branches.iter())
            .map(|b| b.image().len())
            .fold(f64::INFINITY, f64::min);
        checks.push(AssumptionCheck {
            id: "branch-image-length-positive".into(),
            passed: min_image > 0.0,
            detail: format!("min branch image length = {min_image}"),
        });

        ValidationReport {
            passed: checks.iter().all(|c| c.passed),
            checks,
            min_abs_slope,
            min_branch_image_length: min_image,
        }
    }
}
