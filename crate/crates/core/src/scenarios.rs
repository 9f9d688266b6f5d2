//! Built-in map scenarios: the maps, their regional noise-sign assignments,
//! and the fold constructions for the per-component restricted dynamics.
//!
//! Each scenario couples every noise region to a single master draw `σ₀`
//! (law `U(−ε, ε^q)`); a region applies `+σ₀` or `−σ₀` according to its
//! sign. Signs are arranged so the bulk of the noise always pushes the state
//! away from the component boundary, and every boundary-crossing window
//! opens exactly when `σ₀ > 0`.
//!
//! The restricted map of a component replaces each window where the shifted
//! map exits the component with a single steep affine branch (a "fold")
//! whose image spans from the crossed boundary value to a far value chosen
//! per scenario, keeping the restricted dynamics expanding and mixing. Where
//! the shifted image stays inside the open component, restricted and full
//! dynamics coincide.

use crate::geometry::Interval;
use crate::maps::{Branch, Component, MapError, PiecewiseLinearMap, WellId, DOMAIN_TOL};
use crate::noise::{NoiseError, NoiseLaw, NoiseModel, NoiseRegion, TransitionKernel};

/// One excision-and-fold instruction for a restricted map.
///
/// `center` is the extremum (or component endpoint) whose window can cross
/// `boundary`; the fold line runs from the boundary value to `far`, with
/// `continuous_left` choosing which window endpoint matches the neighboring
/// branch value.
#[derive(Debug, Clone, Copy)]
pub struct FoldRule {
    pub component: WellId,
    pub center: f64,
    pub boundary: f64,
    pub far: f64,
    pub continuous_left: bool,
}

/// A built-in scenario: map, noise-sign regions, and fold rules.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub map: PiecewiseLinearMap,
    /// `(region, flip)`: flipped regions receive `−σ₀`.
    flip_regions: Vec<(Interval, bool)>,
    fold_rules: Vec<FoldRule>,
}

/// Result of one restricted-dynamics step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestrictedStep {
    pub value: f64,
    /// True when the step went through a fold branch (the full map would
    /// have left the component).
    pub folded: bool,
}

impl Scenario {
    /// The noise model with the scenario's region/sign assignment.
    pub fn noise_model(&self, epsilon: f64, exponent_q: f64) -> Result<NoiseModel, NoiseError> {
        let eq = epsilon.powf(exponent_q);
        let master = NoiseLaw::UniformAsym { lo: -epsilon, hi: eq };
        let regions = self
            .flip_regions
            .iter()
            .map(|&(interval, flip)| NoiseRegion {
                interval,
                law: if flip { master.mirrored() } else { master },
                flip,
            })
            .collect();
        NoiseModel::new(self.map.ambient(), epsilon, exponent_q, regions)
    }

    /// Transition kernel at the given noise scale.
    pub fn kernel(&self, epsilon: f64, exponent_q: f64) -> Result<TransitionKernel, NoiseError> {
        Ok(TransitionKernel::new(
            self.map.clone(),
            self.noise_model(epsilon, exponent_q)?,
        ))
    }

    /// Sign applied to the master draw at `x` (+1 or −1).
    pub fn sign_at(&self, x: f64) -> f64 {
        let n = self.flip_regions.len();
        for (k, &(interval, flip)) in self.flip_regions.iter().enumerate() {
            let hi_ok = if k + 1 == n {
                x <= interval.hi
            } else {
                x < interval.hi
            };
            if x >= interval.lo && hi_ok {
                return if flip { -1.0 } else { 1.0 };
            }
        }
        1.0
    }

    pub fn fold_rules(&self, id: WellId) -> impl Iterator<Item = &FoldRule> {
        self.fold_rules.iter().filter(move |r| r.component == id)
    }

    /// The affine pieces of the component map shifted by the regional signs
    /// of `sigma0`, before any fold is applied. Pieces are split at region
    /// boundaries (where the sign changes).
    fn shifted_pieces(&self, id: WellId, sigma0: f64) -> Result<Vec<AffinePiece>, MapError> {
        let comp = self.map.component(id)?;
        let mut pieces = Vec::new();
        for b in comp.branches() {
            for &(region, flip) in &self.flip_regions {
                let Some(overlap) = b.domain().intersect(&region) else {
                    continue;
                };
                if overlap.is_degenerate() {
                    continue;
                }
                let shift = if flip { -sigma0 } else { sigma0 };
                pieces.push(AffinePiece {
                    domain: overlap,
                    slope: b.slope(),
                    intercept: b.intercept() + shift,
                });
            }
        }
        pieces.sort_by(|a, b| a.domain.lo.total_cmp(&b.domain.lo));
        Ok(pieces)
    }

    /// Active fold windows `(x_l, x_r)` of the component at `sigma0`, in
    /// left-to-right order.
    pub fn fold_windows(&self, id: WellId, sigma0: f64) -> Result<Vec<(f64, f64)>, MapError> {
        let comp = self.map.component(id)?;
        let pieces = self.shifted_pieces(id, sigma0)?;
        let mut windows = Vec::new();
        for rule in self.fold_rules(id) {
            if let Some(w) = fold_window(&pieces, comp.interval(), rule)? {
                windows.push(w);
            }
        }
        windows.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(windows)
    }

    /// The restricted map of component `id` for the master draw `sigma0`,
    /// assembled as a standalone single-component system on the component
    /// interval (labeled 1).
    pub fn restricted(&self, id: WellId, sigma0: f64) -> Result<PiecewiseLinearMap, MapError> {
        let comp = self.map.component(id)?;
        let iv = comp.interval();
        let mut pieces = self.shifted_pieces(id, sigma0)?;
        for rule in self.fold_rules(id) {
            let Some((xl, xr)) = fold_window(&pieces, iv, rule)? else {
                continue;
            };
            excise(&mut pieces, xl, xr)?;
            let (yl, yr) = if rule.continuous_left {
                (rule.boundary, rule.far)
            } else {
                (rule.far, rule.boundary)
            };
            let slope = (yr - yl) / (xr - xl);
            pieces.push(AffinePiece {
                domain: Interval::new(xl, xr),
                slope,
                intercept: yl - slope * xl,
            });
        }
        pieces.sort_by(|a, b| a.domain.lo.total_cmp(&b.domain.lo));
        let branches = pieces
            .into_iter()
            .map(|p| Branch::from_parts(p.domain, p.slope, p.intercept))
            .collect();
        PiecewiseLinearMap::new(iv, vec![Component::new(WellId(1), iv, branches)])
    }

    /// One restricted-dynamics step: coincides with the full perturbed step
    /// (same floating-point operations) whenever that step stays strictly
    /// inside the component; otherwise evaluates the fold branch covering
    /// `x`.
    pub fn restricted_step(
        &self,
        id: WellId,
        x: f64,
        sigma0: f64,
    ) -> Result<RestrictedStep, MapError> {
        let comp = self.map.component(id)?;
        let iv = comp.interval();
        let y = self.map.eval(x)? + self.sign_at(x) * sigma0;
        if y > iv.lo && y < iv.hi {
            return Ok(RestrictedStep { value: y, folded: false });
        }
        let pieces = self.shifted_pieces(id, sigma0)?;
        for rule in self.fold_rules(id) {
            let Some((xl, xr)) = fold_window(&pieces, iv, rule)? else {
                continue;
            };
            if x >= xl && x <= xr {
                let (yl, yr) = if rule.continuous_left {
                    (rule.boundary, rule.far)
                } else {
                    (rule.far, rule.boundary)
                };
                let value = yl + (x - xl) * (yr - yl) / (xr - xl);
                return Ok(RestrictedStep { value, folded: true });
            }
        }
        // only reachable when rounding parks y exactly on the boundary of a
        // window endpoint; clamp rather than fail
        Ok(RestrictedStep {
            value: y.clamp(iv.lo, iv.hi),
            folded: false,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct AffinePiece {
    domain: Interval,
    slope: f64,
    intercept: f64,
}

impl AffinePiece {
    fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Window `(x_l, x_r)` where the shifted pieces cross the rule's boundary
/// around its center, or `None` when the extremum stays inside.
fn fold_window(
    pieces: &[AffinePiece],
    iv: Interval,
    rule: &FoldRule,
) -> Result<Option<(f64, f64)>, MapError> {
    let top = rule.boundary == iv.hi;
    // value at the extremum, from an adjacent piece
    let v = pieces
        .iter()
        .find(|p| p.domain.contains_closed(rule.center))
        .map(|p| p.eval(rule.center))
        .ok_or(MapError::OutOfDomain { x: rule.center })?;
    // strict crossing with a tolerance margin: the unshifted extremum sits
    // exactly at the boundary value, and rounding can park it a few ulp past
    // it, which must not open a zero-width window
    let active = if top {
        v > rule.boundary + DOMAIN_TOL
    } else {
        v < rule.boundary - DOMAIN_TOL
    };
    if !active {
        return Ok(None);
    }
    let solve = |p: &AffinePiece| (rule.boundary - p.intercept) / p.slope;
    let xl = if rule.center > iv.lo {
        let left = pieces
            .iter()
            .rev()
            .find(|p| p.domain.lo < rule.center && p.domain.hi >= rule.center)
            .ok_or(MapError::OutOfDomain { x: rule.center })?;
        let x = solve(left);
        if x < left.domain.lo || x > rule.center {
            return Err(MapError::InvalidStructure(format!(
                "fold window at {} escapes the adjacent branch (noise too large)",
                rule.center
            )));
        }
        x
    } else {
        rule.center
    };
    let xr = if rule.center < iv.hi {
        let right = pieces
            .iter()
            .find(|p| p.domain.lo <= rule.center && p.domain.hi > rule.center)
            .ok_or(MapError::OutOfDomain { x: rule.center })?;
        let x = solve(right);
        if x < rule.center || x > right.domain.hi {
            return Err(MapError::InvalidStructure(format!(
                "fold window at {} escapes the adjacent branch (noise too large)",
                rule.center
            )));
        }
        x
    } else {
        rule.center
    };
    Ok(Some((xl, xr)))
}

/// Removes the open window `(xl, xr)` from the pieces, trimming the
/// overlapping ones and dropping any piece it swallows.
fn excise(pieces: &mut Vec<AffinePiece>, xl: f64, xr: f64) -> Result<(), MapError> {
    let mut out = Vec::with_capacity(pieces.len() + 1);
    for p in pieces.drain(..) {
        if p.domain.hi <= xl || p.domain.lo >= xr {
            out.push(p);
            continue;
        }
        if p.domain.lo < xl {
            out.push(AffinePiece {
                domain: Interval::new(p.domain.lo, xl),
                ..p
            });
        }
        if p.domain.hi > xr {
            out.push(AffinePiece {
                domain: Interval::new(xr, p.domain.hi),
                ..p
            });
        }
    }
    *pieces = out;
    Ok(())
}

/// Two-well map on `[0, 1]`: each half carries four branches of slope
/// `±(4 − 8b)` between the trough height `b` and the shared midpoint value
/// `1/2`; the right half is the point reflection of the left through
/// `(1/2, 1/2)`. Expansion needs `b < 1/4`; larger values still construct
/// (so the failure is reported by `validate`) but slopes drop to 2 or below.
pub fn two_well(b: f64) -> Scenario {
    assert!(b > 0.0 && b < 0.5, "two_well needs 0 < b < 1/2");
    let top = 1.0 - b;
    let c1 = Component::new(
        WellId(1),
        Interval::new(0.0, 0.5),
        vec![
            Branch::through(0.0, b, 0.125, 0.5),
            Branch::through(0.125, 0.5, 0.25, b),
            Branch::through(0.25, b, 0.375, 0.5),
            Branch::through(0.375, 0.5, 0.5, b),
        ],
    );
    let c2 = Component::new(
        WellId(2),
        Interval::new(0.5, 1.0),
        vec![
            Branch::through(0.5, top, 0.625, 0.5),
            Branch::through(0.625, 0.5, 0.75, top),
            Branch::through(0.75, top, 0.875, 0.5),
            Branch::through(0.875, 0.5, 1.0, top),
        ],
    );
    let map = PiecewiseLinearMap::new(Interval::new(0.0, 1.0), vec![c1, c2]).unwrap();
    let rule = |component, center, far, continuous_left| FoldRule {
        component,
        center,
        boundary: 0.5,
        far,
        continuous_left,
    };
    Scenario {
        name: "two_well",
        map,
        flip_regions: vec![
            (Interval::new(0.0, 0.5), false),
            (Interval::new(0.5, 1.0), true),
        ],
        fold_rules: vec![
            rule(WellId(1), 0.125, b, false),
            rule(WellId(1), 0.375, b, false),
            rule(WellId(2), 0.625, top, true),
            rule(WellId(2), 0.875, top, true),
        ],
    }
}

/// Two-well variant with three branches per half (slope `±(3 − 6b)`); the
/// map is continuous at the midpoint, where the left half ends rising into
/// the shared value `1/2`. Expansion needs `b < 1/6`; larger values still
/// construct so `validate` can report the slope failure.
pub fn two_well_a(b: f64) -> Scenario {
    assert!(b > 0.0 && b < 0.5, "two_well_a needs 0 < b < 1/2");
    let top = 1.0 - b;
    let third = 1.0 / 3.0;
    let sixth = 1.0 / 6.0;
    let c1 = Component::new(
        WellId(1),
        Interval::new(0.0, 0.5),
        vec![
            Branch::through(0.0, b, sixth, 0.5),
            Branch::through(sixth, 0.5, third, b),
            Branch::through(third, b, 0.5, 0.5),
        ],
    );
    let c2 = Component::new(
        WellId(2),
        Interval::new(0.5, 1.0),
        vec![
            Branch::through(0.5, 0.5, 2.0 * third, top),
            Branch::through(2.0 * third, top, 5.0 * sixth, 0.5),
            Branch::through(5.0 * sixth, 0.5, 1.0, top),
        ],
    );
    let map = PiecewiseLinearMap::new(Interval::new(0.0, 1.0), vec![c1, c2]).unwrap();
    let rule = |component, center, far, continuous_left| FoldRule {
        component,
        center,
        boundary: 0.5,
        far,
        continuous_left,
    };
    Scenario {
        name: "two_well_a",
        map,
        flip_regions: vec![
            (Interval::new(0.0, 0.5), false),
            (Interval::new(0.5, 1.0), true),
        ],
        fold_rules: vec![
            rule(WellId(1), sixth, b, false),
            // the last branch rises into the boundary at the component
            // endpoint, so its window is one-sided
            rule(WellId(1), 0.5, b, false),
            rule(WellId(2), 0.5, top, true),
            rule(WellId(2), 5.0 * sixth, top, true),
        ],
    }
}

/// The second fixed point of the three-well map inside the middle
/// component (on its rising branch): `x̄ = 17/36`.
pub fn three_well_x_bar() -> f64 {
    17.0 / 36.0
}

/// Three-well map on `[0, 1]`: outer components with four branches of slope
/// `±3.4` (heights 0.05 to 1/3 on the left, mirrored on the right) and an
/// asymmetric middle component with slopes −3.62, +2.5, −2.5. The middle
/// noise sign changes at the fixed point `x̄`, so both middle escape windows
/// open for positive master draws.
pub fn three_well() -> Scenario {
    let third = 1.0 / 3.0;
    let twelfth = 1.0 / 12.0;
    let x_bar = three_well_x_bar();
    let c1 = Component::new(
        WellId(1),
        Interval::new(0.0, third),
        vec![
            Branch::through(0.0, 0.05, twelfth, third),
            Branch::through(twelfth, third, 2.0 * twelfth, 0.05),
            Branch::through(2.0 * twelfth, 0.05, 3.0 * twelfth, third),
            Branch::through(3.0 * twelfth, third, third, 0.05),
        ],
    );
    let c2 = Component::new(
        WellId(2),
        Interval::new(third, 2.0 * third),
        vec![
            Branch::through(third, 0.635, 5.0 * twelfth, third),
            Branch::through(5.0 * twelfth, third, 0.55, 2.0 * third),
            Branch::through(0.55, 2.0 * third, 2.0 * third, 0.375),
        ],
    );
    let c3 = Component::new(
        WellId(3),
        Interval::new(2.0 * third, 1.0),
        vec![
            Branch::through(2.0 * third, 0.95, 9.0 * twelfth, 2.0 * third),
            Branch::through(9.0 * twelfth, 2.0 * third, 10.0 * twelfth, 0.95),
            Branch::through(10.0 * twelfth, 0.95, 11.0 * twelfth, 2.0 * third),
            Branch::through(11.0 * twelfth, 2.0 * third, 1.0, 0.95),
        ],
    );
    let map = PiecewiseLinearMap::new(Interval::new(0.0, 1.0), vec![c1, c2, c3]).unwrap();
    Scenario {
        name: "three_well",
        map,
        flip_regions: vec![
            (Interval::new(0.0, third), false),
            (Interval::new(third, x_bar), true),
            (Interval::new(x_bar, 2.0 * third), false),
            (Interval::new(2.0 * third, 1.0), true),
        ],
        fold_rules: vec![
            FoldRule {
                component: WellId(1),
                center: twelfth,
                boundary: third,
                far: 0.05,
                continuous_left: false,
            },
            FoldRule {
                component: WellId(1),
                center: 3.0 * twelfth,
                boundary: third,
                far: 0.05,
                continuous_left: false,
            },
            FoldRule {
                component: WellId(2),
                center: 5.0 * twelfth,
                boundary: third,
                far: 0.635,
                continuous_left: true,
            },
            FoldRule {
                component: WellId(2),
                center: 0.55,
                boundary: 2.0 * third,
                far: 0.375,
                continuous_left: true,
            },
            FoldRule {
                component: WellId(3),
                center: 9.0 * twelfth,
                boundary: 2.0 * third,
                far: 0.95,
                continuous_left: true,
            },
            FoldRule {
                component: WellId(3),
                center: 11.0 * twelfth,
                boundary: 2.0 * third,
                far: 0.95,
                continuous_left: true,
            },
        ],
    }
}

/// The doubling map `x ↦ 2x mod 1` as a single-component system; used as a
/// spectral oracle (its grid transfer operator has a known second
/// eigenvalue near 1/2). Not a metastable scenario.
pub fn doubling() -> PiecewiseLinearMap {
    let c = Component::new(
        WellId(1),
        Interval::new(0.0, 1.0),
        vec![
            Branch::through(0.0, 0.0, 0.5, 1.0),
            Branch::through(0.5, 0.0, 1.0, 1.0),
        ],
    );
    PiecewiseLinearMap::new(Interval::new(0.0, 1.0), vec![c]).unwrap()
}
