//! Holes and metastable wells.
//!
//! For each ordered pair of adjacent components, a boundary neighborhood
//! `B(i→j)` is the closed interval of chosen half-width lying inside the
//! closure of component `i` and abutting the boundary point it shares with
//! component `j`. The hole `Δ(i→j)` is the set of points of component `i`
//! whose deterministic image lands in `B(i→j)`: from there, one favorable
//! noise draw crosses into component `j`. The well `E_i` is what remains of
//! the component after removing its holes.
//!
//! Holes are stored as closed intervals and wells as their complements;
//! shared endpoints carry zero mass, so the convention does not affect any
//! measure.

use crate::geometry::{Interval, IntervalUnion};
use crate::grid::GridFunction;
use crate::maps::{MapError, PiecewiseLinearMap, WellId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WellError {
    #[error("components {i} and {j} are not adjacent but δ({i},{j}) > 0")]
    NonAdjacent { i: WellId, j: WellId },
    #[error("holes {i}→{j1} and {i}→{j2} touch or overlap")]
    Overlap { i: WellId, j1: WellId, j2: WellId },
    #[error("δ must be a κ×κ matrix of nonnegative entries: {0}")]
    BadDelta(String),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Half-widths `δ(i→j)` of the boundary neighborhoods, one per ordered
/// component pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaMatrix {
    kappa: usize,
    values: Vec<f64>,
}

impl DeltaMatrix {
    pub fn new(kappa: usize, values: Vec<f64>) -> Result<Self, WellError> {
        if values.len() != kappa * kappa {
            return Err(WellError::BadDelta(format!(
                "expected {} entries, got {}",
                kappa * kappa,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(WellError::BadDelta(
                "entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { kappa, values })
    }

    /// The same half-width for every adjacent ordered pair, zero elsewhere.
    pub fn uniform_adjacent(map: &PiecewiseLinearMap, delta: f64) -> Result<Self, WellError> {
        let kappa = map.kappa();
        let mut values = vec![0.0; kappa * kappa];
        for i in 1..=kappa {
            for j in 1..=kappa {
                if map.adjacent(WellId(i), WellId(j))? {
                    values[(i - 1) * kappa + (j - 1)] = delta;
                }
            }
        }
        Self::new(kappa, values)
    }

    pub fn get(&self, i: WellId, j: WellId) -> f64 {
        self.values[i.idx() * self.kappa + j.idx()]
    }

    pub fn set(&mut self, i: WellId, j: WellId, delta: f64) {
        self.values[i.idx() * self.kappa + j.idx()] = delta;
    }
}

/// The computed holes, wells, and boundary neighborhoods of a map at one
/// noise scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WellStructure {
    pub epsilon: f64,
    kappa: usize,
    /// `B(i→j)` for each ordered pair (empty when δ = 0 or non-adjacent).
    boundary_neighborhoods: Vec<Option<Interval>>,
    /// `Δ(i→j)` row-major by `(i, j)`.
    holes: Vec<IntervalUnion>,
    /// `E_i = I_i` minus its holes.
    wells: Vec<IntervalUnion>,
    hole_union: IntervalUnion,
    well_union: IntervalUnion,
}

/// Per-well masses of a density, plus the mass left on the holes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WellMasses {
    pub wells: Vec<f64>,
    pub holes: f64,
}

/// Builds the well structure for the given half-width matrix.
///
/// `epsilon` is recorded as metadata (the conventional default half-width
/// is `ε^q`, but any nonnegative matrix is accepted).
pub fn build_wells(
    map: &PiecewiseLinearMap,
    epsilon: f64,
    deltas: &DeltaMatrix,
) -> Result<WellStructure, WellError> {
    let kappa = map.kappa();
    if deltas.kappa != kappa {
        return Err(WellError::BadDelta(format!(
            "matrix is {}×{} but the map has {} components",
            deltas.kappa, deltas.kappa, kappa
        )));
    }
    let mut boundary_neighborhoods = vec![None; kappa * kappa];
    let mut holes = vec![IntervalUnion::empty(); kappa * kappa];
    for i in 1..=kappa {
        for j in 1..=kappa {
            if i == j {
                continue;
            }
            let (wi, wj) = (WellId(i), WellId(j));
            let delta = deltas.get(wi, wj);
            if delta == 0.0 {
                continue;
            }
            if !map.adjacent(wi, wj)? {
                return Err(WellError::NonAdjacent { i: wi, j: wj });
            }
            let ci = map.component(wi)?.interval();
            let cj = map.component(wj)?.interval();
            // the closed δ-interval inside the closure of I_i abutting the
            // shared boundary point
            let b = if ci.hi == cj.lo {
                Interval::new(ci.hi - delta, ci.hi)
            } else {
                Interval::new(ci.lo, ci.lo + delta)
            };
            let idx = (i - 1) * kappa + (j - 1);
            boundary_neighborhoods[idx] = Some(b);
            holes[idx] = map.preimage_of_interval(&b, wi)?;
        }
    }

    // holes of a component toward different targets must not meet
    for i in 1..=kappa {
        for j1 in 1..=kappa {
            for j2 in (j1 + 1)..=kappa {
                let a = &holes[(i - 1) * kappa + (j1 - 1)];
                let b = &holes[(i - 1) * kappa + (j2 - 1)];
                if a.is_empty() || b.is_empty() {
                    continue;
                }
                if a.distance_to_union(b) == 0.0 {
                    return Err(WellError::Overlap {
                        i: WellId(i),
                        j1: WellId(j1),
                        j2: WellId(j2),
                    });
                }
            }
        }
    }

    let mut wells = Vec::with_capacity(kappa);
    for i in 1..=kappa {
        let iv = map.component(WellId(i))?.interval();
        let mut component_holes = IntervalUnion::empty();
        for j in 1..=kappa {
            component_holes = component_holes.union(&holes[(i - 1) * kappa + (j - 1)]);
        }
        wells.push(component_holes.complement_within(&iv));
    }
    let hole_union = holes
        .iter()
        .fold(IntervalUnion::empty(), |acc, h| acc.union(h));
    let well_union = wells
        .iter()
        .fold(IntervalUnion::empty(), |acc, w| acc.union(w));

    Ok(WellStructure {
        epsilon,
        kappa,
        boundary_neighborhoods,
        holes,
        wells,
        hole_union,
        well_union,
    })
}

impl WellStructure {
    pub fn kappa(&self) -> usize {
        self.kappa
    }

    /// `Δ(i→j)`.
    pub fn hole(&self, i: WellId, j: WellId) -> &IntervalUnion {
        &self.holes[i.idx() * self.kappa + j.idx()]
    }

    /// `Δ_i`: all holes leaving component `i`.
    pub fn component_holes(&self, i: WellId) -> IntervalUnion {
        (1..=self.kappa).fold(IntervalUnion::empty(), |acc, j| {
            acc.union(self.hole(i, WellId(j)))
        })
    }

    /// `E_i`.
    pub fn well(&self, i: WellId) -> &IntervalUnion {
        &self.wells[i.idx()]
    }

    /// `Δ`: every hole.
    pub fn hole_union(&self) -> &IntervalUnion {
        &self.hole_union
    }

    /// `E`: every well.
    pub fn well_union(&self) -> &IntervalUnion {
        &self.well_union
    }

    /// `Ě_i`: all wells except `E_i`.
    pub fn other_wells(&self, i: WellId) -> IntervalUnion {
        (1..=self.kappa)
            .filter(|&j| j != i.0)
            .fold(IntervalUnion::empty(), |acc, j| {
                acc.union(self.well(WellId(j)))
            })
    }

    pub fn boundary_neighborhood(&self, i: WellId, j: WellId) -> Option<Interval> {
        self.boundary_neighborhoods[i.idx() * self.kappa + j.idx()]
    }

    /// Realized separation: the minimum distance from a hole `Δ(j'→j)` to a
    /// third component `I_i` over pairwise-distinct triples, or `None` when
    /// no such triple has a nonempty hole (e.g. two components).
    pub fn separation(&self, map: &PiecewiseLinearMap) -> Option<f64> {
        let mut best: Option<f64> = None;
        for jp in 1..=self.kappa {
            for j in 1..=self.kappa {
                if j == jp {
                    continue;
                }
                let hole = self.hole(WellId(jp), WellId(j));
                if hole.is_empty() {
                    continue;
                }
                for i in 1..=self.kappa {
                    if i == j || i == jp {
                        continue;
                    }
                    let iv = map.component(WellId(i)).expect("component").interval();
                    let d = hole.distance_to_union(&IntervalUnion::singleton(iv));
                    best = Some(best.map_or(d, |b: f64| b.min(d)));
                }
            }
        }
        best
    }

    /// Integrates a density over every well and over the hole union.
    pub fn measure_under(&self, density: &GridFunction) -> WellMasses {
        WellMasses {
            wells: self
                .wells
                .iter()
                .map(|w| density.integral_over(w))
                .collect(),
            holes: density.integral_over(&self.hole_union),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, GridFunction};
    use crate::scenarios;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_well_structure(eps: f64, q: f64) -> (PiecewiseLinearMap, WellStructure) {
        let map = scenarios::two_well(0.05).map;
        let delta = eps.powf(q);
        let d = DeltaMatrix::uniform_adjacent(&map, delta).unwrap();
        let w = build_wells(&map, eps, &d).unwrap();
        (map, w)
    }

    #[test]
    fn two_well_holes_sit_at_the_peaks() {
        let (_, w) = two_well_structure(0.1, 3.0);
        let delta = 0.001;
        let h12 = w.hole(WellId(1), WellId(2));
        assert_eq!(h12.parts().len(), 2);
        let width = 2.0 * delta / 3.6;
        for (part, center) in h12.parts().iter().zip([0.125, 0.375]) {
            assert_abs_diff_eq!(part.len(), width, epsilon = 1e-12);
            assert_abs_diff_eq!(part.midpoint(), center, epsilon = 1e-12);
        }
        // the mirrored holes are exact translates by 1/2
        let h21 = w.hole(WellId(2), WellId(1));
        assert_eq!(h21.parts().len(), 2);
        for (p21, p12) in h21.parts().iter().zip(h12.parts()) {
            assert_abs_diff_eq!(p21.lo, p12.lo + 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(p21.hi, p12.hi + 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_delta_leaves_components_whole() {
        let map = scenarios::two_well(0.05).map;
        let d = DeltaMatrix::uniform_adjacent(&map, 0.0).unwrap();
        let w = build_wells(&map, 0.1, &d).unwrap();
        assert!(w.hole_union().is_empty());
        assert_abs_diff_eq!(w.well(WellId(1)).measure(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w.well(WellId(2)).measure(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn non_adjacent_pair_is_rejected() {
        let map = scenarios::three_well().map;
        let mut d = DeltaMatrix::uniform_adjacent(&map, 1e-4).unwrap();
        d.set(WellId(1), WellId(3), 1e-4);
        let err = build_wells(&map, 0.02, &d).unwrap_err();
        assert_eq!(
            err,
            WellError::NonAdjacent {
                i: WellId(1),
                j: WellId(3)
            }
        );
    }

    #[test]
    fn three_well_structure_and_separation() {
        let map = scenarios::three_well().map;
        let eps: f64 = 0.02;
        let delta = eps.powi(3);
        let d = DeltaMatrix::uniform_adjacent(&map, delta).unwrap();
        let w = build_wells(&map, eps, &d).unwrap();
        assert!(w.hole(WellId(1), WellId(3)).is_empty());
        assert!(w.hole(WellId(3), WellId(1)).is_empty());
        // middle component: trough hole around 5/12 (left side steeper),
        // peak hole around 0.55 (symmetric)
        let h21 = w.hole(WellId(2), WellId(1));
        assert_eq!(h21.parts().len(), 1);
        assert_abs_diff_eq!(h21.parts()[0].lo, 5.0 / 12.0 - delta / 3.62, epsilon = 1e-12);
        assert_abs_diff_eq!(h21.parts()[0].hi, 5.0 / 12.0 + delta / 2.5, epsilon = 1e-12);
        let h23 = w.hole(WellId(2), WellId(3));
        assert_abs_diff_eq!(h23.parts()[0].midpoint(), 0.55, epsilon = 1e-12);
        // separation: closest hole-to-third-component gap is Δ(2→3) to I_1
        let s = w.separation(&map).unwrap();
        assert_abs_diff_eq!(s, 0.55 - delta / 2.5 - 1.0 / 3.0, epsilon = 1e-10);
        assert!(s > 0.2);
    }

    #[test]
    fn masses_of_uniform_density_equal_lengths() {
        let (map, w) = two_well_structure(0.1, 3.0);
        let g = Grid::new(map.ambient(), 4096);
        let masses = w.measure_under(&GridFunction::uniform_density(g));
        let hole_len = w.hole_union().measure();
        assert_abs_diff_eq!(masses.holes, hole_len, epsilon = 1e-12);
        let total: f64 = masses.wells.iter().sum::<f64>() + masses.holes;
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
        // closed-form hole length: two peaks per component, width 2δ/s each
        assert_abs_diff_eq!(hole_len, 4.0 * 2.0 * 0.001 / 3.6, epsilon = 1e-12);
    }

    proptest! {
        /// Wells and holes partition each component's length.
        #[test]
        fn wells_and_holes_partition_components(
            eps in 0.02..0.09f64,
            q in 2.1..4.0f64,
        ) {
            let (map, w) = two_well_structure(eps, q);
            for i in [WellId(1), WellId(2)] {
                let len = map.component(i).unwrap().interval().len();
                let got = w.well(i).measure() + w.component_holes(i).measure();
                prop_assert!((got - len).abs() < 1e-12);
            }
        }

        /// Hole length scales like the half-width: Σ 2δ/|slope| per peak.
        #[test]
        fn hole_length_matches_closed_form(delta in 1e-6..1e-3f64) {
            let map = scenarios::two_well(0.05).map;
            let d = DeltaMatrix::uniform_adjacent(&map, delta).unwrap();
            let w = build_wells(&map, 0.05, &d).unwrap();
            let expect = 4.0 * 2.0 * delta / 3.6;
            prop_assert!((w.hole_union().measure() - expect).abs() < 1e-12);
        }
    }
}
