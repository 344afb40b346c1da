//! Reference arrangement methods for relative comparison: a random
//! bijection, a Kohonen map with unique assignment via linear assignment,
//! and plain 2-opt swap descent on the neighborhood loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lap::solve_lap;
use crate::loss::{self, GridShape};
use crate::matrix::Matrix;
use crate::metrics;
use crate::permgen::Permutation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SomConfig {
    /// Full passes over the dataset; each pass presents every vector once in
    /// random order.
    pub epochs: usize,
    /// Neighborhood radius at the start; 0 picks max(n_x, n_y) / 2.
    pub initial_radius: f64,
    pub final_radius: f64,
    pub initial_lr: f64,
    pub final_lr: f64,
    pub seed: u64,
}

impl Default for SomConfig {
    fn default() -> Self {
        SomConfig {
            epochs: 40,
            initial_radius: 0.0,
            final_radius: 0.5,
            initial_lr: 0.5,
            final_lr: 0.01,
            seed: 0,
        }
    }
}

impl SomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if self.initial_radius < 0.0 || !(self.final_radius > 0.0) {
            return Err(Error::Parameter("radii must be positive".into()));
        }
        if !(self.initial_lr > 0.0) || !(self.final_lr > 0.0) {
            return Err(Error::Parameter("learning rates must be positive".into()));
        }
        if self.initial_lr < self.final_lr
            || (self.initial_radius > 0.0 && self.initial_radius < self.final_radius)
        {
            return Err(Error::Parameter("schedules must be decreasing".into()));
        }
        Ok(())
    }
}

/// Uniform random bijection from a seeded stream.
pub fn random_arrangement(n: usize, seed: u64) -> Result<Permutation> {
    if n < 1 {
        return Err(Error::Parameter("n must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    Permutation::new(v)
}

/// Trains an n_x x n_y map of d-dimensional cells with exponentially
/// decaying radius and learning rate, then assigns each input to a unique
/// cell by solving the linear assignment on squared distances.
pub fn som_sort(x: &Matrix, grid: &GridShape, cfg: &SomConfig) -> Result<Permutation> {
    cfg.validate()?;
    let n = grid.n();
    if x.rows() != n {
        return Err(Error::Dimension(format!(
            "dataset has {} vectors but the grid has {n} cells",
            x.rows()
        )));
    }
    let d_bar = loss::mean_sqdist_value(&loss::pairwise_sqdist_plain(x))?;
    if !(d_bar > 0.0) {
        return Err(Error::Degenerate("all vectors are identical".into()));
    }
    let d = x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // initialize map cells with random data samples
    let mut map = Matrix::zeros(n, d);
    for c in 0..n {
        let pick = rng.gen_range(0..n);
        map.row_mut(c).copy_from_slice(x.row(pick));
    }

    let r0 = if cfg.initial_radius > 0.0 {
        cfg.initial_radius
    } else {
        (grid.n_x.max(grid.n_y) as f64) / 2.0
    };
    let r1 = cfg.final_radius.min(r0);
    let total = cfg.epochs * n;
    let mut presented = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    let pos = grid.positions();

    for _ in 0..cfg.epochs {
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for &sample in &order {
            let frac = presented as f64 / total as f64;
            let radius = r0 * (r1 / r0).powf(frac);
            let lr = cfg.initial_lr * (cfg.final_lr / cfg.initial_lr).powf(frac);
            presented += 1;

            // best matching unit
            let xin = x.row(sample);
            let mut bmu = 0usize;
            let mut best = f64::INFINITY;
            for c in 0..n {
                let dist: f64 = map
                    .row(c)
                    .iter()
                    .zip(xin)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best {
                    best = dist;
                    bmu = c;
                }
            }
            let (bx, by) = pos[bmu];
            let two_sigma_sq = 2.0 * radius * radius;
            for c in 0..n {
                let (cx, cy) = pos[c];
                let dx = cx as f64 - bx as f64;
                let dy = cy as f64 - by as f64;
                let w = lr * (-(dx * dx + dy * dy) / two_sigma_sq).exp();
                if w < 1e-6 {
                    continue;
                }
                for (m, v) in map.row_mut(c).iter_mut().zip(xin) {
                    *m += w * (v - *m);
                }
            }
        }
    }

    // unique assignment: input i -> cell j minimizing total squared distance
    let mut cost = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let dist: f64 = x
                .row(i)
                .iter()
                .zip(map.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            cost.set(i, j, dist);
        }
    }
    let (perm, _) = solve_lap(&cost)?;
    Ok(perm)
}

/// Repeated full scans over all cell pairs, applying any swap that strictly
/// lowers the neighborhood loss, until a pass makes no change or the pass
/// budget runs out.
pub fn swap_2opt(
    x: &Matrix,
    grid: &GridShape,
    start: &Permutation,
    max_passes: usize,
) -> Result<Permutation> {
    let n = grid.n();
    if x.rows() != n || start.n() != n {
        return Err(Error::Dimension("sizes must match the grid".into()));
    }
    let d_bar = loss::mean_sqdist_value(&loss::pairwise_sqdist_plain(x))?;
    if !(d_bar > 0.0) {
        return Err(Error::Degenerate("all vectors are identical".into()));
    }
    let d = loss::pairwise_sqdist_plain(x);
    let hp = grid.horizontal_pairs();
    let vp = grid.vertical_pairs();
    let (wh, wv) = metrics::pair_weights(&hp, &vp, d_bar)?;

    // weighted adjacency of each cell
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(a, b) in &hp {
        adj[a].push((b, wh));
        adj[b].push((a, wh));
    }
    for &(a, b) in &vp {
        adj[a].push((b, wv));
        adj[b].push((a, wv));
    }

    // order[cell] = input occupying the cell
    let mut order = vec![0usize; n];
    for (input, &cell) in start.assignment().iter().enumerate() {
        order[cell] = input;
    }

    let local = |order: &[usize], cell: usize, input: usize| -> f64 {
        adj[cell]
            .iter()
            .map(|&(other, w)| w * d.get(input, order[other]))
            .sum()
    };

    for _ in 0..max_passes {
        let mut changed = false;
        for a in 0..n {
            for b in (a + 1)..n {
                let (ia, ib) = (order[a], order[b]);
                let before = local(&order, a, ia) + local(&order, b, ib);
                order[a] = ib;
                order[b] = ia;
                let after = local(&order, a, ib) + local(&order, b, ia);
                // adjacent cells: the shared edge appears in both sums both
                // times, so the comparison is still exact
                if after + 1e-15 < before {
                    changed = true;
                } else {
                    order[a] = ia;
                    order[b] = ib;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut assignment = vec![0usize; n];
    for (cell, &input) in order.iter().enumerate() {
        assignment[input] = cell;
    }
    Permutation::new(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{brute_force_optimum, quality};
    use rand::Rng;

    fn random_data(seed: u64, n: usize, d: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        Matrix::from_vec(n, d, data).unwrap()
    }

    #[test]
    fn random_arrangement_basics() {
        assert_eq!(random_arrangement(1, 0).unwrap().assignment(), &[0]);
        let a = random_arrangement(8, 5).unwrap();
        let b = random_arrangement(8, 5).unwrap();
        assert_eq!(a, b);
        let c = random_arrangement(8, 6).unwrap();
        assert!(a != c || a.n() == 1);
    }

    #[test]
    fn random_arrangement_roughly_uniform() {
        let n = 6;
        let draws = 10_000;
        let mut counts = vec![vec![0usize; n]; n];
        for s in 0..draws {
            let p = random_arrangement(n, s as u64).unwrap();
            for (i, &c) in p.assignment().iter().enumerate() {
                counts[i][c] += 1;
            }
        }
        // chi-square-style sanity: every position frequency near draws/n
        let expect = draws as f64 / n as f64;
        for row in &counts {
            for &c in row {
                let dev = (c as f64 - expect).abs() / expect;
                assert!(dev < 0.15, "count {c} vs expected {expect}");
            }
        }
    }

    #[test]
    fn som_monotone_on_1d_line() {
        // 1-d inputs on a 1 x n grid should come out in near-monotone order
        let n = 16;
        let grid = GridShape::new(n, 1).unwrap();
        let x = random_data(3, n, 1);
        let perm = som_sort(&x, &grid, &SomConfig::default()).unwrap();
        // Spearman rank correlation between value rank and grid position
        let mut value_rank: Vec<usize> = (0..n).collect();
        value_rank.sort_by(|&a, &b| x.get(a, 0).total_cmp(&x.get(b, 0)));
        let mut rank_of = vec![0usize; n];
        for (r, &i) in value_rank.iter().enumerate() {
            rank_of[i] = r;
        }
        let mut num = 0.0;
        for i in 0..n {
            let dpos = perm.assignment()[i] as f64 - rank_of[i] as f64;
            num += dpos * dpos;
        }
        let rho = 1.0 - 6.0 * num / (n as f64 * ((n * n - 1) as f64));
        assert!(rho.abs() > 0.9, "rho={rho}");
    }

    #[test]
    fn som_beats_random_on_colors() {
        let grid = GridShape::new(8, 8).unwrap();
        let mut wins = 0;
        for seed in 0..10u64 {
            let x = random_data(100 + seed, 64, 3);
            let som = som_sort(&x, &grid, &SomConfig { seed, ..Default::default() }).unwrap();
            let rnd = random_arrangement(64, seed).unwrap();
            let qs = quality(&som, &x, &grid, 16.0).unwrap().q_nbr;
            let qr = quality(&rnd, &x, &grid, 16.0).unwrap().q_nbr;
            if qs > qr {
                wins += 1;
            }
        }
        assert!(wins >= 9, "SOM beat random only {wins}/10 times");
    }

    #[test]
    fn som_rejects_constant_data() {
        let grid = GridShape::new(2, 2).unwrap();
        let x = Matrix::filled(4, 3, 0.1);
        assert!(som_sort(&x, &grid, &SomConfig::default()).is_err());
    }

    #[test]
    fn two_opt_monotone_and_bounded() {
        let grid = GridShape::new(3, 2).unwrap();
        let x = random_data(7, 6, 3);
        let start = random_arrangement(6, 1).unwrap();
        let q_start = quality(&start, &x, &grid, 16.0).unwrap().l_nbr_raw;
        let out = swap_2opt(&x, &grid, &start, 100).unwrap();
        let q_out = quality(&out, &x, &grid, 16.0).unwrap().l_nbr_raw;
        assert!(q_out <= q_start + 1e-12);
        let (_, best) = brute_force_optimum(&x, &grid).unwrap();
        assert!(q_out >= best - 1e-12);
    }

    #[test]
    fn two_opt_keeps_global_optimum() {
        let grid = GridShape::new(3, 2).unwrap();
        let x = random_data(8, 6, 3);
        let (opt, best) = brute_force_optimum(&x, &grid).unwrap();
        let out = swap_2opt(&x, &grid, &opt, 100).unwrap();
        let q_out = quality(&out, &x, &grid, 16.0).unwrap().l_nbr_raw;
        assert!((q_out - best).abs() < 1e-12);
    }
}
