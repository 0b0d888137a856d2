//! Hard decoding: the linear assignment problem over a score matrix, applied
//! token reordering, and the exact jump objective of a hard permutation.

use thiserror::Error;

use crate::scores::ScoreBundle;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum RoundingError {
    #[error("expected a square matrix, got {0:?}")]
    NotSquare(Vec<usize>),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("length mismatch: {tokens} tokens vs permutation of {perm}")]
    LengthMismatch { tokens: usize, perm: usize },
}

/// Output-position -> input-position assignment with the value it achieved.
/// `value` is the objective of whichever problem produced the permutation
/// (assignment value for [`hungarian`], jump objective for [`round_soft`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Permutation {
    pub perm: Vec<usize>,
    pub value: f64,
}

impl Permutation {
    pub fn n(&self) -> usize {
        self.perm.len()
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (j, &i) in self.perm.iter().enumerate() {
            inv[i] = j;
        }
        inv
    }
}

/// Maximum-score linear assignment via the Hungarian algorithm with
/// potentials, O(n^3). Exact ties between exchangeable optima are settled by
/// preferring the smaller input index at the earlier output position.
pub fn hungarian(scores: &Tensor) -> Result<Permutation, RoundingError> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(RoundingError::NotSquare(shape.to_vec()));
    }
    if !scores.is_finite() {
        return Err(RoundingError::NonFinite);
    }
    let n = shape[0];
    // minimize the negated scores; 1-based arrays with a virtual 0 column
    let cost = |i: usize, j: usize| -scores.at(&[i, j]);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut assigned_row = vec![0usize; n + 1]; // per column: matched row (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm: Vec<usize> = (1..=n).map(|j| assigned_row[j] - 1).collect();

    // value-preserving pairwise swaps toward lexicographic preference
    loop {
        let mut changed = false;
        for j1 in 0..n {
            for j2 in j1 + 1..n {
                let (i1, i2) = (perm[j1], perm[j2]);
                if i2 < i1
                    && scores.at(&[i1, j1]) + scores.at(&[i2, j2])
                        == scores.at(&[i2, j1]) + scores.at(&[i1, j2])
                {
                    perm.swap(j1, j2);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let value = (0..n).map(|j| scores.at(&[perm[j], j])).sum();
    Ok(Permutation { perm, value })
}

/// y_j = z'_{perm(j)}.
pub fn apply_permutation(z_prime: &[u32], perm: &[usize]) -> Result<Vec<u32>, RoundingError> {
    if z_prime.len() != perm.len() {
        return Err(RoundingError::LengthMismatch { tokens: z_prime.len(), perm: perm.len() });
    }
    Ok(perm.iter().map(|&i| z_prime[i]).collect())
}

/// Jump objective of a hard permutation: placement scores at the first and
/// last output positions plus the score of every traversed jump.
pub fn eval_objective(perm: &[usize], bundle: &ScoreBundle) -> f64 {
    let n = perm.len();
    debug_assert_eq!(n, bundle.n());
    let mut total = bundle.s_start.data()[perm[0]] + bundle.s_end.data()[perm[n - 1]];
    for j in 1..n {
        total += bundle.jump.at(&[perm[j - 1], perm[j]]);
    }
    total
}

/// Round a relaxed solution: assignment on U as scores, then score the hard
/// permutation under the original bundle.
pub fn round_soft(u: &Tensor, bundle: &ScoreBundle) -> Result<Permutation, RoundingError> {
    let assignment = hungarian(u)?;
    let value = eval_objective(&assignment.perm, bundle);
    Ok(Permutation { perm: assignment.perm, value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_matrix_yields_identity() {
        let m = Tensor::eye(4);
        let p = hungarian(&m).unwrap();
        assert_eq!(p.perm, vec![0, 1, 2, 3]);
        assert_eq!(p.value, 4.0);
    }

    #[test]
    fn antidiagonal_yields_swap() {
        let m = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let p = hungarian(&m).unwrap();
        assert_eq!(p.perm, vec![1, 0]);
        assert_eq!(p.value, 2.0);
    }

    #[test]
    fn ties_prefer_smaller_input_index_earlier() {
        let m = Tensor::fill(&[3, 3], 1.0);
        let p = hungarian(&m).unwrap();
        assert_eq!(p.perm, vec![0, 1, 2]);
    }

    #[test]
    fn beats_random_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let n = rng.gen_range(3..9);
            let m = Tensor::new(&[n, n], (0..n * n).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .unwrap();
            let best = hungarian(&m).unwrap();
            for _ in 0..1000 {
                let mut perm: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    perm.swap(i, rng.gen_range(0..=i));
                }
                let value: f64 = (0..n).map(|j| m.at(&[perm[j], j])).sum();
                assert!(value <= best.value + 1e-9);
            }
        }
    }

    #[test]
    fn apply_and_inverse_roundtrip() {
        let z = vec![5, 7, 9, 11];
        let perm = Permutation { perm: vec![2, 0, 3, 1], value: 0.0 };
        let y = apply_permutation(&z, &perm.perm).unwrap();
        assert_eq!(y, vec![9, 5, 11, 7]);
        let back = apply_permutation(&y, &perm.inverse()).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn identity_and_swap_application() {
        let z = vec![1, 2];
        assert_eq!(apply_permutation(&z, &[0, 1]).unwrap(), vec![1, 2]);
        assert_eq!(apply_permutation(&z, &[1, 0]).unwrap(), vec![2, 1]);
        assert!(apply_permutation(&z, &[0]).is_err());
    }

    #[test]
    fn objective_counts_single_jump() {
        let mut jump = Tensor::zeros(&[2, 2]);
        jump.set(&[0, 1], 3.0);
        let bundle = ScoreBundle {
            s_start: Tensor::zeros(&[2]),
            s_end: Tensor::zeros(&[2]),
            jump,
            tau: 1.0,
        };
        assert_eq!(eval_objective(&[0, 1], &bundle), 3.0);
        assert_eq!(eval_objective(&[1, 0], &bundle), 0.0);
    }

    #[test]
    fn objective_n1_is_merged_placement() {
        let bundle = ScoreBundle {
            s_start: Tensor::from_vec(vec![1.5]),
            s_end: Tensor::from_vec(vec![0.25]),
            jump: Tensor::zeros(&[1, 1]),
            tau: 1.0,
        };
        assert_eq!(eval_objective(&[0], &bundle), 1.75);
    }
}
