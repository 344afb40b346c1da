//! Differentiable soft permutation generators and hardening.
//!
//! Three generators produce an n x n soft assignment P_soft:
//!   A) full-rank weights pushed through the Gumbel-Sinkhorn operator,
//!   B) low-rank factorization V W^T with a row-wise softmax,
//!   C) SoftSort over a length-n score vector.
//! Hardening takes the row-wise argmax and falls back to an exact linear
//! assignment when the argmax contains duplicates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Node};
use crate::error::{Error, Result};
use crate::lap::solve_lap;
use crate::matrix::Matrix;

/// A hard assignment: entry `i` is the grid cell of input vector `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Permutation {
    assignment: Vec<usize>,
}

impl Permutation {
    /// Fails unless `assignment` is a bijection on `0..n`.
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        let n = assignment.len();
        let mut seen = vec![false; n];
        for &t in &assignment {
            if t >= n || seen[t] {
                return Err(Error::InvalidInput(
                    "assignment is not a bijection".into(),
                ));
            }
            seen[t] = true;
        }
        Ok(Permutation { assignment })
    }

    pub fn identity(n: usize) -> Self {
        Permutation { assignment: (0..n).collect() }
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Reorders the rows of `x`: output row `assignment[i]` is input row `i`.
    pub fn apply_rows(&self, x: &Matrix) -> Matrix {
        debug_assert_eq!(x.rows(), self.n());
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for (i, &cell) in self.assignment.iter().enumerate() {
            out.row_mut(cell).copy_from_slice(x.row(i));
        }
        out
    }

    /// The equivalent hard matrix under `X_sort = P_hard . X`: rows index
    /// grid cells, so there is a 1 at (assignment[i], i).
    pub fn to_matrix(&self) -> Matrix {
        let n = self.n();
        let mut m = Matrix::zeros(n, n);
        for (i, &cell) in self.assignment.iter().enumerate() {
            m.set(cell, i, 1.0);
        }
        m
    }
}

/// Which soft-permutation generator to use, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorKind {
    FullRankGumbelSinkhorn {
        sinkhorn_iters: usize,
        tau: f64,
        beta: f64,
    },
    LowRank {
        rank: usize,
        tau: f64,
    },
    SoftSort {
        tau: f64,
    },
}

impl GeneratorKind {
    /// Paper-style defaults for the full-rank generator: 10 Sinkhorn
    /// iterations, tau = 1, beta = 0.1.
    pub fn full_rank_default() -> Self {
        GeneratorKind::FullRankGumbelSinkhorn { sinkhorn_iters: 10, tau: 1.0, beta: 0.1 }
    }

    /// Default low-rank size: min(n, 2 ceil(sqrt n)).
    pub fn default_lowrank_rank(n: usize) -> usize {
        let m = 2 * (n as f64).sqrt().ceil() as usize;
        m.min(n).max(1)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match *self {
            GeneratorKind::FullRankGumbelSinkhorn { sinkhorn_iters, tau, beta } => {
                if sinkhorn_iters < 1 {
                    return Err(Error::Parameter("sinkhorn_iters must be >= 1".into()));
                }
                if !(tau > 0.0) {
                    return Err(Error::Parameter("tau must be > 0".into()));
                }
                if !(0.0..=1.0).contains(&beta) {
                    return Err(Error::Parameter("beta must be in [0, 1]".into()));
                }
            }
            GeneratorKind::LowRank { rank, tau } => {
                if rank < 1 || rank > n {
                    return Err(Error::Parameter(format!("rank must be in 1..={n}")));
                }
                if !(tau > 0.0) {
                    return Err(Error::Parameter("tau must be > 0".into()));
                }
            }
            GeneratorKind::SoftSort { tau } => {
                if !(tau > 0.0) {
                    return Err(Error::Parameter("tau must be > 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// Counter-based seeded Gumbel noise source. The same seed and counter state
/// always produce the same draws.
#[derive(Debug, Clone)]
pub struct GumbelStream {
    seed: u64,
    counter: u64,
}

impl GumbelStream {
    pub fn new(seed: u64) -> Self {
        GumbelStream { seed, counter: 0 }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Gumbel(0,1) draw: -log(-log(u)), with u clamped away from {0, 1}.
    pub fn next_gumbel(&mut self) -> f64 {
        // SplitMix64 keyed by (seed, counter) gives random access by counter.
        let mut z = self
            .seed
            .wrapping_add(self.counter.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.counter += 1;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        let u = (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u = u.clamp(1e-12, 1.0 - 1e-12);
        -(-u.ln()).ln()
    }

    fn gumbel_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| self.next_gumbel()).collect();
        Matrix::from_vec(rows, cols, data).expect("sized by construction")
    }
}

/// Sinkhorn operator: exp once, then `iters` rounds of column normalization
/// followed by row normalization. The final pass is over rows, so rows sum
/// to 1 exactly (up to rounding).
pub fn sinkhorn(g: &mut Graph, m: Node, iters: usize) -> Result<Node> {
    if iters < 1 {
        return Err(Error::Parameter("sinkhorn iterations must be >= 1".into()));
    }
    let (r, c) = g.value(m).shape();
    if r != c {
        return Err(Error::Dimension(format!("sinkhorn needs a square matrix, got {r}x{c}")));
    }
    let mut cur = g.exp_elem(m)?;
    for _ in 0..iters {
        cur = g.col_normalize(cur)?;
        cur = g.row_normalize(cur)?;
    }
    Ok(cur)
}

/// Gumbel-Sinkhorn: sinkhorn((weights + beta * eps) / tau, iters).
/// The noise is a constant with respect to differentiation; beta = 0 draws
/// nothing and reduces to plain Sinkhorn of weights / tau.
pub fn gumbel_sinkhorn(
    g: &mut Graph,
    weights: Node,
    sinkhorn_iters: usize,
    tau: f64,
    beta: f64,
    noise: &mut GumbelStream,
) -> Result<Node> {
    if !(tau > 0.0) {
        return Err(Error::Parameter("tau must be > 0".into()));
    }
    let (r, c) = g.value(weights).shape();
    let pre = if beta > 0.0 {
        let mut eps = noise.gumbel_matrix(r, c);
        for v in eps.as_mut_slice() {
            *v *= beta;
        }
        let eps = g.constant(eps);
        g.add(weights, eps)?
    } else {
        weights
    };
    let scaled = g.scalar_mul(pre, 1.0 / tau);
    sinkhorn(g, scaled, sinkhorn_iters)
}

/// Low-rank generator: rows of `v` and `w` are normalized to unit length, so
/// the entries of v w^T are cosines; a row-wise softmax at temperature `tau`
/// turns each row into a soft assignment.
pub fn lowrank_soft(g: &mut Graph, v: Node, w: Node, tau: f64) -> Result<Node> {
    if g.value(v).shape() != g.value(w).shape() {
        return Err(Error::Dimension("lowrank factors must share a shape".into()));
    }
    let vu = g.row_unit_normalize(v)?;
    let wu = g.row_unit_normalize(w)?;
    let wt = g.transpose(wu);
    let prod = g.matmul(vu, wt)?;
    g.softmax_rows(prod, tau)
}

/// SoftSort generator over a length-n score column:
/// softmax_rows(-|sort_desc(s) 1^T - 1 s^T| / tau).
pub fn softsort_soft(g: &mut Graph, s: Node, tau: f64) -> Result<Node> {
    let (n, c) = g.value(s).shape();
    if c != 1 {
        return Err(Error::Dimension(format!("scores must be a column vector, got {n}x{c}")));
    }
    // sort_desc(s) = -sort_asc(-s), done on the transposed row
    let neg = g.scalar_mul(s, -1.0);
    let neg_row = g.transpose(neg);
    let sorted_neg = g.sort_rows_asc(neg_row);
    let sorted_desc_row = g.scalar_mul(sorted_neg, -1.0);
    let sorted_desc = g.transpose(sorted_desc_row);

    let ones_row = g.constant(Matrix::filled(1, n, 1.0));
    let ones_col = g.constant(Matrix::filled(n, 1, 1.0));
    let left = g.matmul(sorted_desc, ones_row)?;
    let s_row = g.transpose(s);
    let right = g.matmul(ones_col, s_row)?;
    let diff = g.sub(left, right)?;
    let dist = g.abs_elem(diff);
    let neg_dist = g.scalar_mul(dist, -1.0);
    g.softmax_rows(neg_dist, tau)
}

/// Rows whose argmax collided, keyed by the duplicated target cell.
#[derive(Debug, Clone)]
pub struct DuplicateReport {
    pub collisions: Vec<(usize, Vec<usize>)>,
}

impl DuplicateReport {
    pub fn duplicate_count(&self) -> usize {
        self.collisions.iter().map(|(_, rows)| rows.len() - 1).sum()
    }
}

#[derive(Debug, Clone)]
pub enum HardenOutcome {
    Perm(Permutation),
    Duplicates(DuplicateReport),
}

/// Row-wise argmax (lowest index wins ties). Each row of `p_soft` is a grid
/// cell, so the argmax picks the input claimed by that cell; the result is
/// inverted into input -> cell form. Duplicated targets yield a report
/// rather than an error.
pub fn harden(p_soft: &Matrix) -> Result<HardenOutcome> {
    let (n, c) = p_soft.shape();
    if n != c {
        return Err(Error::Dimension(format!("soft assignment must be square, got {n}x{c}")));
    }
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let row = p_soft.row(i);
        let mut best = 0usize;
        for j in 1..n {
            if row[j] > row[best] {
                best = j;
            }
        }
        targets.push(best);
    }
    let mut hit: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &t) in targets.iter().enumerate() {
        hit[t].push(i);
    }
    let collisions: Vec<(usize, Vec<usize>)> = hit
        .into_iter()
        .enumerate()
        .filter(|(_, rows)| rows.len() > 1)
        .collect();
    if collisions.is_empty() {
        let mut assignment = vec![0usize; n];
        for (cell, &input) in targets.iter().enumerate() {
            assignment[input] = cell;
        }
        Ok(HardenOutcome::Perm(Permutation::new(assignment)?))
    } else {
        Ok(HardenOutcome::Duplicates(DuplicateReport { collisions }))
    }
}

/// Always produces a valid permutation: solves the linear assignment that
/// maximizes the total soft mass sum_i p[i, sigma(i)].
pub fn resolve_duplicates(p_soft: &Matrix) -> Result<Permutation> {
    let (n, c) = p_soft.shape();
    if n != c {
        return Err(Error::Dimension(format!("soft assignment must be square, got {n}x{c}")));
    }
    let mut cost = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            cost.set(i, j, -p_soft.get(i, j));
        }
    }
    let (sigma, _) = solve_lap(&cost)?;
    // sigma maps cell -> input; invert to input -> cell
    let mut assignment = vec![0usize; n];
    for (cell, &input) in sigma.assignment().iter().enumerate() {
        assignment[input] = cell;
    }
    Permutation::new(assignment)
}

/// A generator instance: its kind, learnable weight matrices, and noise
/// stream. One instance is confined to a single training run.
#[derive(Debug, Clone)]
pub struct Generator {
    kind: GeneratorKind,
    n: usize,
    pub params: Vec<Matrix>,
    pub noise: GumbelStream,
}

impl Generator {
    /// Initializes weights i.i.d. normal(0, 0.1) from the seed.
    pub fn new(kind: GeneratorKind, n: usize, seed: u64) -> Result<Self> {
        kind.validate(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let mut sample = |r: usize, c: usize| {
            let data: Vec<f64> = (0..r * c).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_vec(r, c, data).expect("sized by construction")
        };
        let params = match kind {
            GeneratorKind::FullRankGumbelSinkhorn { .. } => vec![sample(n, n)],
            GeneratorKind::LowRank { rank, .. } => vec![sample(n, rank), sample(n, rank)],
            GeneratorKind::SoftSort { .. } => vec![sample(n, 1)],
        };
        // decorrelate noise from weight init
        let noise = GumbelStream::new(seed ^ 0xA076_1D64_78BD_642F);
        Ok(Generator { kind, n, params, noise })
    }

    pub fn kind(&self) -> &GeneratorKind {
        &self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Registers the current weights as graph inputs and builds P_soft.
    /// `noise_on = false` forces beta = 0 (used for duplicate checks).
    pub fn forward(&mut self, g: &mut Graph, noise_on: bool) -> Result<(Vec<Node>, Node)> {
        let nodes: Vec<Node> = self.params.iter().map(|m| g.input(m.clone())).collect();
        let p_soft = match self.kind {
            GeneratorKind::FullRankGumbelSinkhorn { sinkhorn_iters, tau, beta } => {
                let b = if noise_on { beta } else { 0.0 };
                gumbel_sinkhorn(g, nodes[0], sinkhorn_iters, tau, b, &mut self.noise)?
            }
            GeneratorKind::LowRank { tau, .. } => lowrank_soft(g, nodes[0], nodes[1], tau)?,
            GeneratorKind::SoftSort { tau } => softsort_soft(g, nodes[0], tau)?,
        };
        Ok((nodes, p_soft))
    }
}
