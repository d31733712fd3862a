//! Maximum-weight linear assignment on square similarity blocks.
//!
//! [`hungarian_max`] is the O(K^3) Kuhn–Munkres solver used in training.
//! [`brute_force_assignment`] enumerates all `K!` permutations and serves as
//! its oracle for small `K`. [`block_assign`] solves every `K x K` block of a
//! batched similarity matrix independently.

use crate::error::{invalid, Error, Result};
use crate::numgrad::Matrix;

/// Largest block size accepted by the enumeration oracle.
pub const BRUTE_FORCE_MAX_K: usize = 8;

/// An optimal one-to-one matching of rows to columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `perm[m]` is the column matched to row `m`.
    pub perm: Vec<usize>,
    /// Sum of the matched similarities, accumulated in row order.
    pub score: f64,
}

impl Assignment {
    fn from_perm(sim: &Matrix, perm: Vec<usize>) -> Self {
        let score = perm_score(sim, &perm);
        Self { perm, score }
    }

    pub fn k(&self) -> usize {
        self.perm.len()
    }

    /// Binary `K x K` matrix with a one at every matched `(m, perm[m])`.
    pub fn mask(&self) -> Matrix {
        let k = self.k();
        let mut m = Matrix::zeros(k, k);
        for (row, &col) in self.perm.iter().enumerate() {
            m[(row, col)] = 1.0;
        }
        m
    }
}

fn perm_score(sim: &Matrix, perm: &[usize]) -> f64 {
    perm.iter()
        .enumerate()
        .fold(0.0, |acc, (m, &n)| acc + sim[(m, n)])
}

fn validate(sim: &Matrix) -> Result<usize> {
    let (r, c) = sim.shape();
    if r != c {
        return Err(Error::ShapeMismatch {
            op: "assignment",
            left: (r, c),
            right: (c, c),
        });
    }
    if r == 0 {
        return Err(invalid("assignment needs K >= 1"));
    }
    if sim.as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::Domain {
            op: "assignment",
            detail: "NaN entry in similarity block".into(),
        });
    }
    Ok(r)
}

/// Maximum-total-similarity permutation of a square block.
///
/// Runs the shortest-augmenting-path form of Kuhn–Munkres on the negated
/// matrix, adding one row per phase and maintaining dual potentials.
pub fn hungarian_max(sim: &Matrix) -> Result<Assignment> {
    let n = validate(sim)?;
    if n == 1 {
        return Ok(Assignment::from_perm(sim, vec![0]));
    }

    // 1-based arrays, index 0 is the virtual source column.
    let cost = |i: usize, j: usize| -sim[(i - 1, j - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    Ok(Assignment::from_perm(sim, perm))
}

/// Exhaustive maximum over all `K!` permutations, `K <= 8`.
///
/// Permutations are visited in lexicographic order and only a strictly
/// better score replaces the incumbent, so ties resolve to the
/// lexicographically smallest permutation.
pub fn brute_force_assignment(sim: &Matrix) -> Result<Assignment> {
    let n = validate(sim)?;
    if n > BRUTE_FORCE_MAX_K {
        return Err(invalid(format!(
            "brute-force assignment limited to K <= {BRUTE_FORCE_MAX_K}, got K = {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = Assignment::from_perm(sim, perm.clone());
    while next_permutation(&mut perm) {
        let score = perm_score(sim, &perm);
        if score > best.score {
            best = Assignment {
                perm: perm.clone(),
                score,
            };
        }
    }
    Ok(best)
}

/// Advances to the next lexicographic permutation; false after the last.
pub fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Assignments for every `K x K` block of a batched similarity matrix.
#[derive(Clone, Debug)]
pub struct AssignmentGrid {
    pub k: usize,
    pub rows: usize,
    pub cols: usize,
    cells: Vec<Assignment>,
}

impl AssignmentGrid {
    pub fn get(&self, i: usize, j: usize) -> &Assignment {
        &self.cells[i * self.cols + j]
    }

    /// Full-size binary mask with each block's matching in place.
    pub fn mask(&self) -> Matrix {
        let k = self.k;
        let mut m = Matrix::zeros(self.rows * k, self.cols * k);
        for i in 0..self.rows {
            for j in 0..self.cols {
                for (r, &c) in self.get(i, j).perm.iter().enumerate() {
                    m[(i * k + r, j * k + c)] = 1.0;
                }
            }
        }
        m
    }

    pub fn scores(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).score)
    }
}

/// Solves each block `[iK, (i+1)K) x [jK, (j+1)K)` of `batch_sim`.
pub fn block_assign(batch_sim: &Matrix, k: usize) -> Result<AssignmentGrid> {
    let (r, c) = batch_sim.shape();
    if k == 0 || r % k != 0 || c % k != 0 {
        return Err(invalid(format!(
            "similarity matrix {r}x{c} is not divisible into {k}x{k} blocks"
        )));
    }
    let (rows, cols) = (r / k, c / k);
    let mut cells = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            cells.push(hungarian_max(&batch_sim.block(i * k, j * k, k, k))?);
        }
    }
    Ok(AssignmentGrid {
        k,
        rows,
        cols,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, k: usize) -> Matrix {
        Matrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_is_diagonal() {
        let a = hungarian_max(&Matrix::identity(3)).unwrap();
        assert_eq!(a.perm, vec![0, 1, 2]);
        assert_eq!(a.score, 3.0);
    }

    #[test]
    fn anti_diagonal() {
        let a = hungarian_max(&Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]])).unwrap();
        assert_eq!(a.perm, vec![1, 0]);
        assert_eq!(a.score, 2.0);
    }

    #[test]
    fn random_4x4_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = random(&mut rng, 4);
            let h = hungarian_max(&s).unwrap();
            let b = brute_force_assignment(&s).unwrap();
            assert_eq!(h.score, b.score);
            assert_eq!(h.perm, b.perm);
        }
    }

    #[test]
    fn brute_force_singleton_and_ties() {
        let a = brute_force_assignment(&Matrix::from_rows(&[[0.7]])).unwrap();
        assert_eq!((a.perm, a.score), (vec![0], 0.7));
        let a = brute_force_assignment(&Matrix::filled(3, 3, 0.5)).unwrap();
        assert_eq!((a.perm, a.score), (vec![0, 1, 2], 1.5));
    }

    #[test]
    fn brute_force_limit() {
        let err = brute_force_assignment(&Matrix::zeros(9, 9)).unwrap_err();
        assert!(err.to_string().contains("K <= 8"), "{err}");
    }

    #[test]
    fn random_5x5_mutual_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random(&mut rng, 5);
        assert_eq!(
            hungarian_max(&s).unwrap().score,
            brute_force_assignment(&s).unwrap().score
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian_max(&Matrix::zeros(2, 3)).is_err());
        let mut s = Matrix::zeros(2, 2);
        s[(1, 0)] = f64::NAN;
        assert!(matches!(hungarian_max(&s), Err(Error::Domain { .. })));
        assert!(brute_force_assignment(&s).is_err());
    }

    #[test]
    fn mask_is_permutation_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = hungarian_max(&random(&mut rng, 6)).unwrap();
        let m = a.mask();
        for i in 0..6 {
            assert_eq!(m.row(i).iter().sum::<f64>(), 1.0);
            assert_eq!((0..6).map(|r| m[(r, i)]).sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn block_assign_single_block_is_hungarian() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random(&mut rng, 4);
        let grid = block_assign(&s, 4).unwrap();
        assert_eq!(grid.get(0, 0), &hungarian_max(&s).unwrap());
    }

    #[test]
    fn block_assign_identity_blocks() {
        let k = 3;
        let n = 4;
        let s = Matrix::from_fn(n * k, n * k, |r, c| {
            if r / k == c / k && r % k == c % k {
                1.0
            } else {
                0.0
            }
        });
        let grid = block_assign(&s, k).unwrap();
        for i in 0..n {
            assert_eq!(grid.get(i, i).score, k as f64);
            assert_eq!(grid.get(i, i).perm, vec![0, 1, 2]);
        }
    }

    #[test]
    fn block_assign_random_grid_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = Matrix::from_fn(8, 12, |_, _| rng.random_range(-1.0..1.0));
        let grid = block_assign(&s, 4).unwrap();
        assert_eq!((grid.rows, grid.cols), (2, 3));
        for i in 0..2 {
            for j in 0..3 {
                let b = brute_force_assignment(&s.block(i * 4, j * 4, 4, 4)).unwrap();
                assert_eq!(grid.get(i, j).score, b.score);
            }
        }
    }

    #[test]
    fn block_assign_divisibility() {
        assert!(block_assign(&Matrix::zeros(8, 6), 4).is_err());
    }

    #[test]
    fn next_permutation_counts() {
        let mut p: Vec<usize> = (0..5).collect();
        let mut n = 1;
        while next_permutation(&mut p) {
            n += 1;
        }
        assert_eq!(n, 120);
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..=6).prop_flat_map(|k| {
            prop::collection::vec(-1.0f64..1.0, k * k)
                .prop_map(move |d| Matrix::from_vec(k, k, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn hungarian_equals_enumeration(s in matrix_strategy()) {
            let h = hungarian_max(&s).unwrap();
            let b = brute_force_assignment(&s).unwrap();
            prop_assert_eq!(h.score, b.score);
        }

        #[test]
        fn uniform_shift_keeps_perm(s in matrix_strategy(), c in -2.0f64..2.0) {
            let k = s.rows() as f64;
            let a = hungarian_max(&s).unwrap();
            let shifted = hungarian_max(&s.map(|v| v + c)).unwrap();
            prop_assert_eq!(&a.perm, &shifted.perm);
            prop_assert!((shifted.score - (a.score + k * c)).abs() < 1e-9);
        }

        #[test]
        fn row_permutation_permutes_mask(s in matrix_strategy(), seed in any::<u64>()) {
            let k = s.rows();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sigma: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                sigma.swap(i, rng.random_range(0..=i));
            }
            // Row r of the permuted matrix is row sigma[r] of the original.
            let permuted = Matrix::from_fn(k, k, |r, c| s[(sigma[r], c)]);
            let a = brute_force_assignment(&s).unwrap();
            let mut second = f64::NEG_INFINITY;
            let mut p: Vec<usize> = (0..k).collect();
            loop {
                let sc = perm_score(&s, &p);
                if p != a.perm && sc > second {
                    second = sc;
                }
                if !next_permutation(&mut p) { break; }
            }
            prop_assume!(a.score - second > 1e-9);
            let b = hungarian_max(&permuted).unwrap();
            for r in 0..k {
                prop_assert_eq!(b.perm[r], a.perm[sigma[r]]);
            }
        }
    }
}
