//! Interval primitives shared by the map, noise, and well machinery.
//!
//! Everything downstream — branch domains, holes, wells, grid cells — is a
//! finite union of intervals on the real line, so we keep one small,
//! well-tested vocabulary here instead of re-deriving overlap arithmetic in
//! every module. Endpoint conventions (open/half-open/closed) differ by
//! consumer and carry zero Lebesgue mass, so `Interval` itself stores only
//! the endpoints; membership predicates are explicit about the convention.

use serde::{Deserialize, Serialize};

/// A bounded interval `[lo, hi]` with `lo <= hi`.
///
/// The struct is convention-agnostic: callers pick the membership predicate
/// (`contains_closed`, `contains_half_open`) that matches their boundary
/// rules. Degenerate intervals (`lo == hi`) are allowed and have length 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    /// Creates an interval, panicking on reversed or non-finite endpoints.
    ///
    /// Construction sites are all internal geometry with trusted inputs, so a
    /// panic here indicates a programming error, not bad user data.
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(
            lo.is_finite() && hi.is_finite() && lo <= hi,
            "invalid interval [{lo}, {hi}]"
        );
        Self { lo, hi }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Membership in `[lo, hi]`.
    pub fn contains_closed(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// Membership in `[lo, hi)`.
    pub fn contains_half_open(&self, x: f64) -> bool {
        self.lo <= x && x < self.hi
    }

    /// Membership in the open interior `(lo, hi)`.
    pub fn contains_open(&self, x: f64) -> bool {
        self.lo < x && x < self.hi
    }

    /// The overlap `self ∩ other`, or `None` when the closed intervals are
    /// disjoint. A shared endpoint yields a degenerate interval.
    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then(|| Interval { lo, hi })
    }

    /// Length of the overlap with `other` (zero when disjoint).
    pub fn overlap_len(&self, other: &Interval) -> f64 {
        (self.hi.min(other.hi) - self.lo.max(other.lo)).max(0.0)
    }

    /// Distance from `x` to the interval (zero inside).
    pub fn distance_to(&self, x: f64) -> f64 {
        if x < self.lo {
            self.lo - x
        } else if x > self.hi {
            x - self.hi
        } else {
            0.0
        }
    }

    /// Minkowski sum with `[-left, right]` (both nonnegative): widens the
    /// interval by `left` on the left and `right` on the right.
    pub fn grow(&self, left: f64, right: f64) -> Interval {
        Interval::new(self.lo - left, self.hi + right)
    }
}

/// A finite union of pairwise-disjoint intervals kept sorted by left endpoint.
///
/// The normal form merges pieces that overlap or abut, so measure and
/// membership queries are simple scans.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IntervalUnion {
    parts: Vec<Interval>,
}

impl IntervalUnion {
    pub fn empty() -> Self {
        Self { parts: Vec::new() }
    }

    /// Builds the normal form of an arbitrary interval collection: sorted,
    /// with overlapping or abutting pieces merged and degenerate pieces kept
    /// only if isolated (they carry endpoint information for closed-set
    /// semantics even though their measure is zero).
    pub fn from_intervals(mut parts: Vec<Interval>) -> Self {
        parts.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        let mut merged: Vec<Interval> = Vec::with_capacity(parts.len());
        for iv in parts {
            match merged.last_mut() {
                Some(last) if iv.lo <= last.hi => last.hi = last.hi.max(iv.hi),
                _ => merged.push(iv),
            }
        }
        Self { parts: merged }
    }

    pub fn singleton(iv: Interval) -> Self {
        Self { parts: vec![iv] }
    }

    pub fn parts(&self) -> &[Interval] {
        &self.parts
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Total Lebesgue measure.
    pub fn measure(&self) -> f64 {
        self.parts.iter().map(Interval::len).sum()
    }

    /// Membership with closed endpoints on every piece.
    pub fn contains_closed(&self, x: f64) -> bool {
        self.parts.iter().any(|iv| iv.contains_closed(x))
    }

    /// Length of the overlap with a single interval.
    pub fn overlap_len(&self, iv: &Interval) -> f64 {
        self.parts.iter().map(|p| p.overlap_len(iv)).sum()
    }

    /// Union of two unions (normal form).
    pub fn union(&self, other: &IntervalUnion) -> IntervalUnion {
        let mut parts = self.parts.clone();
        parts.extend_from_slice(&other.parts);
        IntervalUnion::from_intervals(parts)
    }

    /// The part of `within` not covered by `self`: `within \ self`, as a
    /// union of intervals. Endpoint conventions are irrelevant at zero
    /// measure; the result uses the leftover closed spans.
    pub fn complement_within(&self, within: &Interval) -> IntervalUnion {
        let mut out = Vec::new();
        let mut cursor = within.lo;
        for p in &self.parts {
            if p.hi < within.lo || p.lo > within.hi {
                continue;
            }
            let lo = p.lo.max(within.lo);
            if lo > cursor {
                out.push(Interval::new(cursor, lo));
            }
            cursor = cursor.max(p.hi.min(within.hi));
        }
        if cursor < within.hi {
            out.push(Interval::new(cursor, within.hi));
        }
        Self { parts: out }
    }

    /// Distance from `x` to the union (zero inside some piece).
    pub fn distance_to(&self, x: f64) -> f64 {
        self.parts
            .iter()
            .map(|p| p.distance_to(x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Minimum distance between two unions (zero if they touch).
    pub fn distance_to_union(&self, other: &IntervalUnion) -> f64 {
        let mut best = f64::INFINITY;
        for a in &self.parts {
            for b in &other.parts {
                let d = if a.hi < b.lo {
                    b.lo - a.hi
                } else if b.hi < a.lo {
                    a.lo - b.hi
                } else {
                    0.0
                };
                best = best.min(d);
            }
        }
        best
    }
}
