//! Exact linear assignment: minimum-cost bijection of n rows to n columns.
//!
//! Shortest augmenting path formulation with dual potentials (the
//! Jonker-Volgenant scheme), O(n^3).

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::permgen::Permutation;

/// Minimizes `sum_i c[i, sigma(i)]` over all bijections `sigma`.
/// Returns an optimal assignment and its exact total cost.
pub fn solve_lap(cost: &Matrix) -> Result<(Permutation, f64)> {
    let (n, m) = cost.shape();
    if n != m {
        return Err(Error::Dimension(format!("cost matrix must be square, got {n}x{m}")));
    }
    if !cost.all_finite() {
        return Err(Error::InvalidInput("cost matrix contains non-finite entries".into()));
    }
    if n == 0 {
        return Err(Error::Degenerate("empty cost matrix".into()));
    }

    // 1-based arrays; p[j] = row currently assigned to column j (0 = none).
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // augment along the alternating path
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.get(i, j))
        .sum();
    let perm = Permutation::new(assignment)?;
    Ok((perm, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_min(cost: &Matrix) -> f64 {
        let n = cost.rows();
        let mut order: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut order, 0, &mut |ord| {
            let c: f64 = ord.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
            if c < best {
                best = c;
            }
        });
        best
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn zero_diagonal_picks_identity() {
        let mut c = Matrix::filled(4, 4, 100.0);
        for i in 0..4 {
            c.set(i, i, 0.0);
        }
        let (perm, cost) = solve_lap(&c).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(perm.assignment(), &[0, 1, 2, 3]);
    }

    #[test]
    fn two_by_two_hand_case() {
        let c = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 1.0]]).unwrap();
        let (perm, cost) = solve_lap(&c).unwrap();
        assert_eq!(cost, 2.0);
        assert_eq!(perm.assignment(), &[0, 1]);
    }

    #[test]
    fn matches_brute_force_small_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in 2..=8 {
            for _ in 0..20 {
                let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let c = Matrix::from_vec(n, n, data).unwrap();
                let (perm, cost) = solve_lap(&c).unwrap();
                let bf = brute_force_min(&c);
                assert!((cost - bf).abs() < 1e-9, "n={n} cost={cost} bf={bf}");
                // bijection
                let mut seen = vec![false; n];
                for &j in perm.assignment() {
                    assert!(!seen[j]);
                    seen[j] = true;
                }
            }
        }
    }

    #[test]
    fn row_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 6;
        let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let c = Matrix::from_vec(n, n, data).unwrap();
        let (_, cost) = solve_lap(&c).unwrap();
        let mut shifted = c.clone();
        for v in shifted.row_mut(2) {
            *v += 3.5;
        }
        let (perm2, cost2) = solve_lap(&shifted).unwrap();
        assert!((cost2 - (cost + 3.5)).abs() < 1e-9);
        // the assignment returned for the shifted matrix is optimal for the
        // original too
        let orig_cost: f64 = perm2
            .assignment()
            .iter()
            .enumerate()
            .map(|(i, &j)| c.get(i, j))
            .sum();
        assert!((orig_cost - cost).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_input() {
        let c = Matrix::from_rows(&[&[1.0, f64::NAN], &[0.0, 1.0]]).unwrap();
        assert!(solve_lap(&c).is_err());
        let c = Matrix::zeros(2, 3);
        assert!(solve_lap(&c).is_err());
    }
}
