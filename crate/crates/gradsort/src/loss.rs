//! Loss terms for grid-based permutation learning: neighborhood smoothness,
//! its quadratic-assignment generalization, the stochastic (doubly
//! stochastic) constraint, the sorted distance-matrix regularizer, and the
//! ramped combination of all of them.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Node};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Rectangular grid geometry. Cell `i` sits at `(i % n_x, i / n_x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub n_x: usize,
    pub n_y: usize,
}

impl GridShape {
    pub fn new(n_x: usize, n_y: usize) -> Result<Self> {
        if n_x < 1 || n_y < 1 {
            return Err(Error::Parameter("grid dimensions must be >= 1".into()));
        }
        Ok(GridShape { n_x, n_y })
    }

    pub fn n(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.n_x, i / self.n_x)
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        (0..self.n()).map(|i| self.coords(i)).collect()
    }

    /// Index pairs of horizontally adjacent cells (row-major, no row wrap).
    pub fn horizontal_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity((self.n_x.saturating_sub(1)) * self.n_y);
        for y in 0..self.n_y {
            for x in 0..self.n_x - 1 {
                let i = y * self.n_x + x;
                out.push((i, i + 1));
            }
        }
        out
    }

    /// Index pairs of vertically adjacent cells.
    pub fn vertical_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_x * self.n_y.saturating_sub(1));
        for i in 0..self.n().saturating_sub(self.n_x) {
            out.push((i, i + self.n_x));
        }
        out
    }
}

/// Weights of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_p: f64,
    pub p_exponent: f64,
    pub use_qap_neighbor: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_s: 100.0, lambda_p: 5.0, p_exponent: 16.0, use_qap_neighbor: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_s < 0.0 || self.lambda_p < 0.0 {
            return Err(Error::Parameter("loss weights must be nonnegative".into()));
        }
        if self.p_exponent < 1.0 {
            return Err(Error::Parameter("p exponent must be >= 1".into()));
        }
        Ok(())
    }
}

/// Differentiable n x n matrix of squared Euclidean distances between the
/// rows of `x`, via |a-b|^2 = |a|^2 + |b|^2 - 2 a.b.
pub fn pairwise_sqdist(g: &mut Graph, x: Node) -> Result<Node> {
    let (n, _) = g.value(x).shape();
    let sq = g.square(x);
    let s = g.sum_rows(sq); // n x 1
    let ones_row = g.constant(Matrix::filled(1, n, 1.0));
    let a = g.matmul(s, ones_row)?; // n x n, row i constant |x_i|^2
    let at = g.transpose(a);
    let xt = g.transpose(x);
    let gram = g.matmul(x, xt)?;
    let g2 = g.scalar_mul(gram, 2.0);
    let sum = g.add(a, at)?;
    g.sub(sum, g2)
}

/// Plain (non-graph) squared-distance matrix, direct double loop.
pub fn pairwise_sqdist_plain(x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

/// Global mean squared distance: sum of the zero-diagonal matrix over n(n-1).
pub fn mean_sqdist(g: &mut Graph, d_x: Node) -> Result<Node> {
    let (n, c) = g.value(d_x).shape();
    if n != c {
        return Err(Error::Dimension("distance matrix must be square".into()));
    }
    if n < 2 {
        return Err(Error::Degenerate("need at least two vectors".into()));
    }
    let s = g.sum_all(d_x);
    Ok(g.scalar_mul(s, 1.0 / (n as f64 * (n as f64 - 1.0))))
}

pub fn mean_sqdist_value(d_x: &Matrix) -> Result<f64> {
    let n = d_x.rows();
    if n < 2 {
        return Err(Error::Degenerate("need at least two vectors".into()));
    }
    Ok(d_x.sum() / (n as f64 * (n as f64 - 1.0)))
}

fn pair_term(g: &mut Graph, y: Node, pairs: &[(usize, usize)]) -> Result<Node> {
    let left: Vec<u32> = pairs.iter().map(|&(a, _)| a as u32).collect();
    let right: Vec<u32> = pairs.iter().map(|&(_, b)| b as u32).collect();
    let l = g.row_gather(y, &left)?;
    let r = g.row_gather(y, &right)?;
    let d = g.sub(l, r)?;
    let sq = g.square(d);
    let s = g.sum_all(sq);
    Ok(g.scalar_mul(s, 1.0 / pairs.len() as f64))
}

/// Mean squared distance of horizontally and vertically adjacent grid
/// vectors, normalized by the global mean squared distance. `y` must be in
/// grid row-major order. A direction without pairs (n_x = 1 or n_y = 1) is
/// dropped and the factor 2 in the denominator becomes 1.
pub fn neighbor_loss(g: &mut Graph, y: Node, grid: &GridShape, d_bar: f64) -> Result<Node> {
    if !(d_bar > 0.0) {
        return Err(Error::Degenerate("mean squared distance must be positive".into()));
    }
    if g.value(y).rows() != grid.n() {
        return Err(Error::Dimension("y rows must equal grid size".into()));
    }
    let hp = grid.horizontal_pairs();
    let vp = grid.vertical_pairs();
    match (hp.is_empty(), vp.is_empty()) {
        (true, true) => Err(Error::Degenerate("grid has no neighboring cells".into())),
        (false, true) => {
            let h = pair_term(g, y, &hp)?;
            Ok(g.scalar_mul(h, 1.0 / d_bar))
        }
        (true, false) => {
            let v = pair_term(g, y, &vp)?;
            Ok(g.scalar_mul(v, 1.0 / d_bar))
        }
        (false, false) => {
            let h = pair_term(g, y, &hp)?;
            let v = pair_term(g, y, &vp)?;
            let s = g.add(h, v)?;
            Ok(g.scalar_mul(s, 1.0 / (2.0 * d_bar)))
        }
    }
}

/// Spatial similarity of grid cells: ((d_max - d_ij) / (d_max - 1))^p with a
/// zero diagonal. Unit-distance neighbors get exactly 1, the most distant
/// pair exactly 0.
pub fn grid_similarity(grid: &GridShape, p: f64) -> Result<Matrix> {
    let n = grid.n();
    if n < 2 {
        return Err(Error::Degenerate("similarity needs at least two cells".into()));
    }
    if p < 1.0 {
        return Err(Error::Parameter("similarity exponent must be >= 1".into()));
    }
    let pos = grid.positions();
    let dist = |i: usize, j: usize| -> f64 {
        let (xi, yi) = pos[i];
        let (xj, yj) = pos[j];
        let dx = xi as f64 - xj as f64;
        let dy = yi as f64 - yj as f64;
        (dx * dx + dy * dy).sqrt()
    };
    let mut d_max = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            d_max = d_max.max(dist(i, j));
        }
    }
    if d_max <= 1.0 {
        return Err(Error::Degenerate("grid too small for the similarity formula".into()));
    }
    let mut sim = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = ((d_max - dist(i, j)) / (d_max - 1.0)).powf(p);
            sim.set(i, j, v);
        }
    }
    Ok(sim)
}

/// Neighborhood loss in quadratic-assignment form:
/// sum_ij delta'_ij sim_ij / (d_bar * sum_ij sim_ij).
pub fn qap_neighbor_loss(
    g: &mut Graph,
    y: Node,
    grid: &GridShape,
    p: f64,
    d_bar: f64,
) -> Result<Node> {
    if !(d_bar > 0.0) {
        return Err(Error::Degenerate("mean squared distance must be positive".into()));
    }
    let sim = grid_similarity(grid, p)?;
    let sim_sum = sim.sum();
    let d_y = pairwise_sqdist(g, y)?;
    let sim_node = g.constant(sim);
    let prod = g.mul(d_y, sim_node)?;
    let s = g.sum_all(prod);
    Ok(g.scalar_mul(s, 1.0 / (d_bar * sim_sum)))
}

/// Stochastic constraint loss: mean squared deviation of absolute row sums
/// and column sums from 1.
pub fn stochastic_loss(g: &mut Graph, p_soft: Node) -> Result<Node> {
    let (n, c) = g.value(p_soft).shape();
    if n != c {
        return Err(Error::Dimension("soft assignment must be square".into()));
    }
    let a = g.abs_elem(p_soft);
    let rs = g.sum_rows(a);
    let ones_col = g.constant(Matrix::filled(n, 1, 1.0));
    let rd = g.sub(rs, ones_col)?;
    let rsq = g.square(rd);
    let rsum = g.sum_all(rsq);
    let cs = g.sum_cols(a);
    let ones_row = g.constant(Matrix::filled(1, n, 1.0));
    let cd = g.sub(cs, ones_row)?;
    let csq = g.square(cd);
    let csum = g.sum_all(csq);
    let tot = g.add(rsum, csum)?;
    Ok(g.scalar_mul(tot, 1.0 / n as f64))
}

/// Distance-matrix loss: both matrices are sorted column-wise then row-wise
/// (ascending), and the normalized L1 difference is returned. `d_x` is
/// expected to be a constant node (no gradient flows into it).
pub fn distmatrix_loss(g: &mut Graph, d_x: Node, d_y: Node) -> Result<Node> {
    if g.value(d_x).shape() != g.value(d_y).shape() {
        return Err(Error::Dimension("distance matrices must share a shape".into()));
    }
    let sum_dx = g.value(d_x).sum();
    if !(sum_dx > 0.0) {
        return Err(Error::Degenerate("distance matrix sums to zero".into()));
    }
    let sdx = sort_cols_then_rows(g, d_x);
    let sdy = sort_cols_then_rows(g, d_y);
    let d = g.sub(sdx, sdy)?;
    let a = g.abs_elem(d);
    let s = g.sum_all(a);
    Ok(g.scalar_mul(s, 1.0 / sum_dx))
}

fn sort_cols_then_rows(g: &mut Graph, m: Node) -> Node {
    let t = g.transpose(m);
    let st = g.sort_rows_asc(t);
    let back = g.transpose(st);
    g.sort_rows_asc(back)
}

/// Values of the individual terms at the current point, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_nbr: f64,
    pub l_s: f64,
    pub l_p: f64,
    pub total: f64,
}

/// Per-dataset constants shared by every training step: the feature matrix,
/// its mean squared distance, and its squared-distance matrix.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub x: Matrix,
    pub d_bar: f64,
    pub d_x: Matrix,
}

impl LossContext {
    pub fn new(x: Matrix) -> Result<Self> {
        if x.rows() < 2 {
            return Err(Error::Degenerate("need at least two vectors".into()));
        }
        let d_x = pairwise_sqdist_plain(&x);
        let d_bar = mean_sqdist_value(&d_x)?;
        if !(d_bar > 0.0) {
            return Err(Error::Degenerate("all vectors are identical".into()));
        }
        Ok(LossContext { x, d_bar, d_x })
    }
}

/// The combined training loss
/// `L_nbr + lambda_s L_s + alpha lambda_p L_p` (with the QAP form of the
/// smoothness term behind a flag). Returns the scalar node and the term
/// values.
pub fn total_loss(
    g: &mut Graph,
    p_soft: Node,
    ctx: &LossContext,
    grid: &GridShape,
    weights: &LossWeights,
    alpha: f64,
) -> Result<(Node, LossTerms)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    weights.validate()?;
    let x = g.constant(ctx.x.clone());
    let y = g.matmul(p_soft, x)?;
    let l_nbr = if weights.use_qap_neighbor {
        qap_neighbor_loss(g, y, grid, weights.p_exponent, ctx.d_bar)?
    } else {
        neighbor_loss(g, y, grid, ctx.d_bar)?
    };
    let l_s = stochastic_loss(g, p_soft)?;
    let d_y = pairwise_sqdist(g, y)?;
    let d_x = g.constant(ctx.d_x.clone());
    let l_p = distmatrix_loss(g, d_x, d_y)?;
    let ws = g.scalar_mul(l_s, weights.lambda_s);
    let wp = g.scalar_mul(l_p, alpha * weights.lambda_p);
    let t1 = g.add(l_nbr, ws)?;
    let total = g.add(t1, wp)?;
    let terms = LossTerms {
        l_nbr: g.scalar(l_nbr),
        l_s: g.scalar(l_s),
        l_p: g.scalar(l_p),
        total: g.scalar(total),
    };
    Ok((total, terms))
}
