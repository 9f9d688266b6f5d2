//! Thin wrappers around the dense and sparse `faer` solvers.
//!
//! Everything here is crate-internal plumbing: callers hand over plain
//! slices and triplets and get plain vectors back, so no backend type leaks
//! into the public API.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use std::sync::Once;

static SEQUENTIAL_BACKEND: Once = Once::new();

/// Forces the backend into sequential mode once, so every factorization and
/// eigensolve gives bit-identical results regardless of how many worker
/// threads the caller configures.
fn pin_backend() {
    SEQUENTIAL_BACKEND.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

/// Moduli of all eigenvalues of the dense matrix `entry(i, j)`, sorted in
/// decreasing order.
pub(crate) fn eigenvalue_moduli(
    n: usize,
    entry: impl Fn(usize, usize) -> f64,
) -> Result<Vec<f64>, String> {
    pin_backend();
    let m = Mat::<f64>::from_fn(n, n, |i, j| entry(i, j));
    let evs: Vec<faer::c64> = m.eigenvalues().map_err(|e| format!("{e:?}"))?;
    let mut moduli: Vec<f64> = evs.iter().map(|z| z.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    Ok(moduli)
}

/// A sparse LU factorization of a square matrix given as `(row, col, value)`
/// triplets (duplicates are summed).
pub(crate) struct SparseSolver {
    lu: Lu<usize, f64>,
    n: usize,
}

impl SparseSolver {
    pub(crate) fn new(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, String> {
        pin_backend();
        let trip: Vec<Triplet<usize, usize, f64>> = triplets
            .iter()
            .map(|&(r, c, v)| Triplet::new(r, c, v))
            .collect();
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| format!("{e:?}"))?;
        let sym = SymbolicLu::try_new(a.symbolic()).map_err(|e| format!("{e:?}"))?;
        let lu = Lu::try_new_with_symbolic(sym, a.as_ref()).map_err(|e| format!("{e:?}"))?;
        Ok(Self { lu, n })
    }

    pub(crate) fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n);
        let b = Mat::<f64>::from_fn(self.n, 1, |i, _| rhs[i]);
        let x = self.lu.solve(&b);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }
}
