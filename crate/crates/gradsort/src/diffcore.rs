//! Minimal reverse-mode differentiation over dense f64 matrices.
//!
//! The graph is define-by-run: every op evaluates eagerly and records the
//! backward rule it needs. A graph is built per training step and thrown
//! away. The op set is exactly what the losses and permutation generators
//! require; there is no broadcasting.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(usize);

#[derive(Debug)]
enum Op {
    Input,
    Constant,
    MatMul(Node, Node),
    ExpElem(Node),
    RowNormalize(Node),
    ColNormalize(Node),
    SoftmaxRows(Node, f64),
    /// Stable per-row argsort recorded at forward time; backward scatters
    /// gradients back through it.
    SortRowsAsc(Node, Vec<u32>),
    Transpose(Node),
    RowGather(Node, Vec<u32>),
    /// Per-row L2 norms recorded at forward time.
    RowUnitNormalize(Node, Vec<f64>),
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Square(Node),
    AbsElem(Node),
    ScalarMul(Node, f64),
    SumAll(Node),
    SumRows(Node),
    SumCols(Node),
}

struct NodeData {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<NodeData>,
    grads: Vec<Option<Matrix>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Node {
        self.nodes.push(NodeData { value, op, requires_grad });
        self.grads.push(None);
        Node(self.nodes.len() - 1)
    }

    /// A differentiable leaf; receives a gradient after [`Graph::backward`].
    pub fn input(&mut self, value: Matrix) -> Node {
        self.push(value, Op::Input, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Matrix) -> Node {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, n: Node) -> &Matrix {
        &self.nodes[n.0].value
    }

    /// Gradient accumulated at `n` by the last backward pass.
    pub fn grad(&self, n: Node) -> Option<&Matrix> {
        self.grads[n.0].as_ref()
    }

    fn rg(&self, n: Node) -> bool {
        self.nodes[n.0].requires_grad
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, n: Node) -> f64 {
        debug_assert_eq!(self.value(n).shape(), (1, 1));
        self.value(n).as_slice()[0]
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Error::Dimension(format!(
                "matmul: {ar}x{ac} . {br}x{bc}"
            )));
        }
        let value = matmul_nn(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn exp_elem(&mut self, a: Node) -> Result<Node> {
        let (r, c) = self.value(a).shape();
        let mut out = Matrix::zeros(r, c);
        for (o, v) in out.as_mut_slice().iter_mut().zip(self.value(a).as_slice()) {
            *o = v.exp();
        }
        if !out.all_finite() {
            let (idx, mag) = self.value(a).max_abs_entry();
            return Err(Error::Numeric(format!(
                "exp overflow at entry {idx} (input magnitude {mag})"
            )));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::ExpElem(a), rg))
    }

    pub fn row_normalize(&mut self, a: Node) -> Result<Node> {
        let (r, c) = self.value(a).shape();
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let s: f64 = self.value(a).row(i).iter().sum();
            if s.abs() < f64::MIN_POSITIVE || !s.is_finite() {
                return Err(Error::ZeroRowSum(i));
            }
            let inv = 1.0 / s;
            for (o, v) in out.row_mut(i).iter_mut().zip(self.value(a).row(i)) {
                *o = v * inv;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::RowNormalize(a), rg))
    }

    pub fn col_normalize(&mut self, a: Node) -> Result<Node> {
        let (r, c) = self.value(a).shape();
        let mut sums = vec![0.0f64; c];
        for i in 0..r {
            for (s, v) in sums.iter_mut().zip(self.value(a).row(i)) {
                *s += v;
            }
        }
        for (j, s) in sums.iter().enumerate() {
            if s.abs() < f64::MIN_POSITIVE || !s.is_finite() {
                return Err(Error::ZeroColSum(j));
            }
        }
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                out.set(i, j, self.value(a).get(i, j) / sums[j]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::ColNormalize(a), rg))
    }

    /// Row-wise softmax of `a / tau`, stabilized by the row max.
    pub fn softmax_rows(&mut self, a: Node, tau: f64) -> Result<Node> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("softmax temperature {tau} <= 0")));
        }
        let (r, c) = self.value(a).shape();
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let row = self.value(a).row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = ((v - m) / tau).exp();
                s += *o;
            }
            for o in out.row_mut(i) {
                *o /= s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows(a, tau), rg))
    }

    /// Sorts each row ascending. Ties keep original order (stable sort), so the
    /// backward scatter is well-defined.
    pub fn sort_rows_asc(&mut self, a: Node) -> Node {
        let (r, c) = self.value(a).shape();
        let mut out = Matrix::zeros(r, c);
        let mut perm = vec![0u32; r * c];
        let mut idx: Vec<u32> = Vec::with_capacity(c);
        for i in 0..r {
            let row = self.value(a).row(i);
            idx.clear();
            idx.extend(0..c as u32);
            idx.sort_by(|&x, &y| row[x as usize].total_cmp(&row[y as usize]));
            for j in 0..c {
                out.set(i, j, row[idx[j] as usize]);
                perm[i * c + j] = idx[j];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SortRowsAsc(a, perm), rg)
    }

    pub fn transpose(&mut self, a: Node) -> Node {
        let value = self.value(a).transposed();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Output row k is input row `indices[k]`; rows may repeat.
    pub fn row_gather(&mut self, a: Node, indices: &[u32]) -> Result<Node> {
        let (r, c) = self.value(a).shape();
        let mut out = Matrix::zeros(indices.len(), c);
        for (k, &i) in indices.iter().enumerate() {
            if i as usize >= r {
                return Err(Error::Dimension(format!(
                    "row_gather index {i} out of range for {r} rows"
                )));
            }
            out.row_mut(k).copy_from_slice(self.value(a).row(i as usize));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::RowGather(a, indices.to_vec()), rg))
    }

    /// Divides each row by its Euclidean norm.
    pub fn row_unit_normalize(&mut self, a: Node) -> Result<Node> {
        let (r, c) = self.value(a).shape();
        let mut out = Matrix::zeros(r, c);
        let mut norms = vec![0.0f64; r];
        for i in 0..r {
            let row = self.value(a).row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < f64::MIN_POSITIVE || !n.is_finite() {
                return Err(Error::Numeric(format!("zero L2 norm at row {i}")));
            }
            norms[i] = n;
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v / n;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::RowUnitNormalize(a, norms), rg))
    }

    fn binary_shape_check(&self, a: Node, b: Node, name: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{name}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary_shape_check(a, b, "add")?;
        let mut value = self.value(a).clone();
        for (o, v) in value.as_mut_slice().iter_mut().zip(self.value(b).as_slice()) {
            *o += v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary_shape_check(a, b, "sub")?;
        let mut value = self.value(a).clone();
        for (o, v) in value.as_mut_slice().iter_mut().zip(self.value(b).as_slice()) {
            *o -= v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary_shape_check(a, b, "mul")?;
        let mut value = self.value(a).clone();
        for (o, v) in value.as_mut_slice().iter_mut().zip(self.value(b).as_slice()) {
            *o *= v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn square(&mut self, a: Node) -> Node {
        let mut value = self.value(a).clone();
        for o in value.as_mut_slice() {
            *o *= *o;
        }
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    /// Elementwise absolute value; subgradient 0 at exactly 0.
    pub fn abs_elem(&mut self, a: Node) -> Node {
        let mut value = self.value(a).clone();
        for o in value.as_mut_slice() {
            *o = o.abs();
        }
        let rg = self.rg(a);
        self.push(value, Op::AbsElem(a), rg)
    }

    pub fn scalar_mul(&mut self, a: Node, s: f64) -> Node {
        let mut value = self.value(a).clone();
        for o in value.as_mut_slice() {
            *o *= s;
        }
        let rg = self.rg(a);
        self.push(value, Op::ScalarMul(a, s), rg)
    }

    pub fn sum_all(&mut self, a: Node) -> Node {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Column vector of row sums (n x 1).
    pub fn sum_rows(&mut self, a: Node) -> Node {
        let (r, _) = self.value(a).shape();
        let mut value = Matrix::zeros(r, 1);
        for i in 0..r {
            value.set(i, 0, self.value(a).row(i).iter().sum());
        }
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Row vector of column sums (1 x m).
    pub fn sum_cols(&mut self, a: Node) -> Node {
        let (r, c) = self.value(a).shape();
        let mut value = Matrix::zeros(1, c);
        for i in 0..r {
            for (o, v) in value.as_mut_slice().iter_mut().zip(self.value(a).row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    fn acc(&mut self, n: Node, add: impl FnOnce(&mut Matrix)) {
        if !self.rg(n) {
            return;
        }
        let (r, c) = self.nodes[n.0].value.shape();
        let g = self.grads[n.0].get_or_insert_with(|| Matrix::zeros(r, c));
        add(g);
    }

    /// Reverse pass from a 1x1 scalar output. Gradients of previous backward
    /// passes on this graph are cleared first.
    pub fn backward(&mut self, out: Node) -> Result<()> {
        if self.value(out).shape() != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward requires a 1x1 output, got {:?}",
                self.value(out).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[out.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            // Take the op out to appease the borrow checker; leaves are cheap
            // to swap back.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Input);
            self.backprop(i, &op, &g)?;
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &Matrix) -> Result<()> {
        match op {
            Op::Input | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let da = matmul_nt(g, &self.nodes[b.0].value);
                    self.acc(a, |m| add_into(m, &da));
                }
                if self.rg(b) {
                    let db = matmul_tn(&self.nodes[a.0].value, g);
                    self.acc(b, |m| add_into(m, &db));
                }
            }
            Op::ExpElem(a) => {
                let out = &self.nodes[i].value;
                let mut da = g.clone();
                for (o, v) in da.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *o *= v;
                }
                self.acc(*a, |m| add_into(m, &da));
            }
            Op::RowNormalize(a) => {
                let a = *a;
                let (r, c) = g.shape();
                let mut da = Matrix::zeros(r, c);
                for row in 0..r {
                    let ain = self.nodes[a.0].value.row(row);
                    let y = self.nodes[i].value.row(row);
                    let s: f64 = ain.iter().sum();
                    let dot: f64 = g.row(row).iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..c {
                        da.set(row, j, (g.get(row, j) - dot) / s);
                    }
                }
                self.acc(a, |m| add_into(m, &da));
            }
            Op::ColNormalize(a) => {
                let a = *a;
                let (r, c) = g.shape();
                let mut sums = vec![0.0f64; c];
                let mut dots = vec![0.0f64; c];
                for row in 0..r {
                    for j in 0..c {
                        sums[j] += self.nodes[a.0].value.get(row, j);
                        dots[j] += g.get(row, j) * self.nodes[i].value.get(row, j);
                    }
                }
                let mut da = Matrix::zeros(r, c);
                for row in 0..r {
                    for j in 0..c {
                        da.set(row, j, (g.get(row, j) - dots[j]) / sums[j]);
                    }
                }
                self.acc(a, |m| add_into(m, &da));
            }
            Op::SoftmaxRows(a, tau) => {
                let (a, tau) = (*a, *tau);
                let (r, c) = g.shape();
                let mut da = Matrix::zeros(r, c);
                for row in 0..r {
                    let y = self.nodes[i].value.row(row);
                    let dot: f64 = g.row(row).iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..c {
                        let yj = y[j];
                        da.set(row, j, yj * (g.get(row, j) - dot) / tau);
                    }
                }
                self.acc(a, |m| add_into(m, &da));
            }
            Op::SortRowsAsc(a, perm) => {
                let a = *a;
                let (r, c) = g.shape();
                let mut da = Matrix::zeros(r, c);
                for row in 0..r {
                    for j in 0..c {
                        let src = perm[row * c + j] as usize;
                        da.set(row, src, da.get(row, src) + g.get(row, j));
                    }
                }
                self.acc(a, |m| add_into(m, &da));
            }
            Op::Transpose(a) => {
                let da = g.transposed();
                self.acc(*a, |m| add_into(m, &da));
            }
            Op::RowGather(a, idx) => {
                let a = *a;
                let (ar, ac) = self.nodes[a.0].value.shape();
                let mut da = Matrix::zeros(ar, ac);
                for (k, &src) in idx.iter().enumerate() {
                    let src = src as usize;
                    for (o, v) in da.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.acc(a, |m| add_into(m, &da));
            }
            Op::RowUnitNormalize(a, norms) => {
                let a = *a;
                let (r, c) = g.shape();
                let mut da = Matrix::zeros(r, c);
                for row in 0..r {
                    let y = self.nodes[i].value.row(row);
                    let dot: f64 = g.row(row).iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..c {
                        da.set(row, j, (g.get(row, j) - y[j] * dot) / norms[row]);
                    }
                }
                self.acc(a, |m| add_into(m, &da));
            }
            Op::Add(a, b) => {
                self.acc(*a, |m| add_into(m, g));
                self.acc(*b, |m| add_into(m, g));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |m| add_into(m, g));
                self.acc(*b, |m| sub_into(m, g));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let mut da = g.clone();
                    for (o, v) in da
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[b.0].value.as_slice())
                    {
                        *o *= v;
                    }
                    self.acc(a, |m| add_into(m, &da));
                }
                if self.rg(b) {
                    let mut db = g.clone();
                    for (o, v) in db
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[a.0].value.as_slice())
                    {
                        *o *= v;
                    }
                    self.acc(b, |m| add_into(m, &db));
                }
            }
            Op::Square(a) => {
                let a = *a;
                let mut da = g.clone();
                for (o, v) in da
                    .as_mut_slice()
                    .iter_mut()
                    .zip(self.nodes[a.0].value.as_slice())
                {
                    *o *= 2.0 * v;
                }
                self.acc(a, |m| add_into(m, &da));
            }
            Op::AbsElem(a) => {
                let a = *a;
                let mut da = g.clone();
                for (o, v) in da
                    .as_mut_slice()
                    .iter_mut()
                    .zip(self.nodes[a.0].value.as_slice())
                {
                    *o *= if *v > 0.0 {
                        1.0
                    } else if *v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                self.acc(a, |m| add_into(m, &da));
            }
            Op::ScalarMul(a, s) => {
                let s = *s;
                let mut da = g.clone();
                for o in da.as_mut_slice() {
                    *o *= s;
                }
                self.acc(*a, |m| add_into(m, &da));
            }
            Op::SumAll(a) => {
                let gv = g.as_slice()[0];
                self.acc(*a, |m| {
                    for o in m.as_mut_slice() {
                        *o += gv;
                    }
                });
            }
            Op::SumRows(a) => {
                let a = *a;
                let (r, c) = self.nodes[a.0].value.shape();
                let mut da = Matrix::zeros(r, c);
                for row in 0..r {
                    let gv = g.get(row, 0);
                    for o in da.row_mut(row) {
                        *o = gv;
                    }
                }
                self.acc(a, |m| add_into(m, &da));
            }
            Op::SumCols(a) => {
                let a = *a;
                let (r, c) = self.nodes[a.0].value.shape();
                let mut da = Matrix::zeros(r, c);
                for row in 0..r {
                    for j in 0..c {
                        da.set(row, j, g.get(0, j));
                    }
                }
                self.acc(a, |m| add_into(m, &da));
            }
        }
        Ok(())
    }
}

fn add_into(a: &mut Matrix, b: &Matrix) {
    for (o, v) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o += v;
    }
}

fn sub_into(a: &mut Matrix, b: &Matrix) {
    for (o, v) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o -= v;
    }
}

/// a (r x k) . b (k x c)
pub(crate) fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
    let (r, _) = a.shape();
    let (_, c) = b.shape();
    let mut out = Matrix::zeros(r, c);
    for i in 0..r {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(kk)) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a (r x k) . b^T where b is (c x k)
fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    let (r, k) = a.shape();
    let (c, _) = b.shape();
    let mut out = Matrix::zeros(r, c);
    for i in 0..r {
        let arow = a.row(i);
        for j in 0..c {
            let brow = b.row(j);
            let mut s = 0.0;
            for kk in 0..k {
                s += arow[kk] * brow[kk];
            }
            out.set(i, j, s);
        }
    }
    out
}

/// a^T . b where a is (k x r), b is (k x c)
fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    let (k, r) = a.shape();
    let (_, c) = b.shape();
    let mut out = Matrix::zeros(r, c);
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for i in 0..r {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out.row_mut(i).iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Central finite-difference gradient of a scalar function of several matrices.
pub fn fd_gradient<F>(f: &F, xs: &[Matrix], h: f64) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Graph, &[Node]) -> Result<Node>,
{
    let eval = |ms: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let nodes: Vec<Node> = ms.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &nodes)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite function value".into()));
        }
        Ok(v)
    };
    let mut grads = Vec::with_capacity(xs.len());
    let mut work: Vec<Matrix> = xs.to_vec();
    for k in 0..xs.len() {
        let (r, c) = xs[k].shape();
        let mut gm = Matrix::zeros(r, c);
        for e in 0..r * c {
            let orig = work[k].as_slice()[e];
            work[k].as_mut_slice()[e] = orig + h;
            let fp = eval(&work)?;
            work[k].as_mut_slice()[e] = orig - h;
            let fm = eval(&work)?;
            work[k].as_mut_slice()[e] = orig;
            gm.as_mut_slice()[e] = (fp - fm) / (2.0 * h);
        }
        grads.push(gm);
    }
    Ok(grads)
}

/// Max relative error between analytic (reverse-mode) and central
/// finite-difference gradients, over all entries of all inputs.
/// Relative error uses `|a - fd| / max(1, |fd|)`.
pub fn grad_check_multi<F>(f: &F, xs: &[Matrix], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Node]) -> Result<Node>,
{
    let mut g = Graph::new();
    let nodes: Vec<Node> = xs.iter().map(|m| g.input(m.clone())).collect();
    let out = f(&mut g, &nodes)?;
    if g.value(out).shape() != (1, 1) {
        return Err(Error::Dimension("grad_check requires a scalar output".into()));
    }
    if !g.scalar(out).is_finite() {
        return Err(Error::Numeric("non-finite function value".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Matrix> = nodes
        .iter()
        .map(|&n| {
            let (r, c) = g.value(n).shape();
            g.grad(n).cloned().unwrap_or_else(|| Matrix::zeros(r, c))
        })
        .collect();
    let fd = fd_gradient(f, xs, h)?;
    let mut max_err = 0.0f64;
    for (a, d) in analytic.iter().zip(&fd) {
        for (av, dv) in a.as_slice().iter().zip(d.as_slice()) {
            let err = (av - dv).abs() / f64::max(1.0, dv.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// Single-input convenience form of [`grad_check_multi`].
pub fn grad_check<F>(f: F, x: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Node) -> Result<Node>,
{
    grad_check_multi(&|g: &mut Graph, ns: &[Node]| f(g, ns[0]), std::slice::from_ref(x), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let x = g.input(Matrix::from_rows(&[&[1., 2.], &[3., 4.], &[5., 6.]]).unwrap());
        let i3 = g.constant(Matrix::identity(3));
        let y = g.matmul(i3, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Matrix::filled(3, 2, 1.0));

        let mut g = Graph::new();
        let a = g.input(Matrix::from_rows(&[&[1., 2.], &[3., 4.]]).unwrap());
        let b = g.input(Matrix::from_rows(&[&[1.], &[1.]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &Matrix::from_rows(&[&[3.], &[7.]]).unwrap());
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.input(Matrix::zeros(2, 3));
        let b = g.input(Matrix::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 3, 2);
        let err = grad_check_multi(
            &|g: &mut Graph, ns: &[Node]| {
                let y = g.matmul(ns[0], ns[1])?;
                let y = g.square(y);
                Ok(g.sum_all(y))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn exp_elem_basics_and_gradcheck() {
        let mut g = Graph::new();
        let z = g.input(Matrix::zeros(2, 2));
        let e = g.exp_elem(z).unwrap();
        assert_eq!(g.value(e), &Matrix::filled(2, 2, 1.0));

        let mut g = Graph::new();
        let x = g.input(Matrix::filled(1, 1, 2f64.ln()));
        let e = g.exp_elem(x).unwrap();
        assert!((g.scalar(e) - 2.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 3, 3);
        let err = grad_check(
            |g, n| {
                let e = g.exp_elem(n)?;
                Ok(g.sum_all(e))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn exp_overflow_reported() {
        let mut g = Graph::new();
        let x = g.input(Matrix::filled(1, 1, 1e9));
        assert!(matches!(g.exp_elem(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn row_normalize_basics() {
        let mut g = Graph::new();
        let x = g.input(Matrix::filled(2, 2, 1.0));
        let y = g.row_normalize(x).unwrap();
        assert_eq!(g.value(y), &Matrix::filled(2, 2, 0.5));

        // already row-stochastic: fixed point
        let mut g = Graph::new();
        let m = Matrix::from_rows(&[&[0.3, 0.7], &[0.9, 0.1]]).unwrap();
        let x = g.input(m.clone());
        let y = g.row_normalize(x).unwrap();
        for (a, b) in g.value(y).as_slice().iter().zip(m.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_zero_sum_errors() {
        let mut g = Graph::new();
        let x = g.input(Matrix::from_rows(&[&[1.0, -1.0], &[1.0, 1.0]]).unwrap());
        assert!(matches!(g.row_normalize(x), Err(Error::ZeroRowSum(0))));
        let mut g = Graph::new();
        let x = g.input(Matrix::from_rows(&[&[1.0, 1.0], &[-1.0, 1.0]]).unwrap());
        assert!(matches!(g.col_normalize(x), Err(Error::ZeroColSum(0))));
    }

    #[test]
    fn normalize_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.1..2.0)).collect();
        let x = Matrix::from_vec(4, 4, data).unwrap();
        for which in 0..2 {
            let err = grad_check(
                |g, n| {
                    let y = if which == 0 {
                        g.row_normalize(n)?
                    } else {
                        g.col_normalize(n)?
                    };
                    let y = g.square(y);
                    Ok(g.sum_all(y))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "which={which} err={err}");
        }
        // rows sum to 1
        let mut g = Graph::new();
        let n = g.input(x);
        let y = g.row_normalize(n).unwrap();
        for i in 0..4 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_basics_and_gradcheck() {
        let mut g = Graph::new();
        let x = g.input(Matrix::zeros(1, 2));
        let y = g.softmax_rows(x, 1.0).unwrap();
        assert_eq!(g.value(y), &Matrix::filled(1, 2, 0.5));

        let mut g = Graph::new();
        let x = g.input(Matrix::from_rows(&[&[10.0, 0.0]]).unwrap());
        let y = g.softmax_rows(x, 0.01).unwrap();
        assert!(g.value(y).get(0, 0) > 1.0 - 1e-9);
        assert!(g.value(y).get(0, 1) < 1e-9);

        assert!(matches!(
            {
                let mut g = Graph::new();
                let x = g.input(Matrix::zeros(1, 2));
                g.softmax_rows(x, 0.0)
            },
            Err(Error::Parameter(_))
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 3, 3);
        let err = grad_check(
            |g, n| {
                let y = g.softmax_rows(n, 0.7)?;
                let y = g.square(y);
                Ok(g.sum_all(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn sort_rows_scatter_backward() {
        let mut g = Graph::new();
        let x = g.input(Matrix::from_rows(&[&[3.0, 1.0, 2.0]]).unwrap());
        let y = g.sort_rows_asc(x);
        assert_eq!(g.value(y), &Matrix::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
        // backward of upstream [a,b,c] lands as [c,a,b]
        let w = g.constant(Matrix::from_rows(&[&[10.0, 20.0, 30.0]]).unwrap());
        let p = g.mul(y, w).unwrap();
        let s = g.sum_all(p);
        g.backward(s).unwrap();
        assert_eq!(
            g.grad(x).unwrap(),
            &Matrix::from_rows(&[&[30.0, 10.0, 20.0]]).unwrap()
        );
    }

    #[test]
    fn sort_rows_sorted_is_identity_and_mass_conserved() {
        let mut g = Graph::new();
        let m = Matrix::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let x = g.input(m.clone());
        let y = g.sort_rows_asc(x);
        assert_eq!(g.value(y), &m);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Matrix::filled(1, 3, 1.0));

        // gradient mass conservation with all-ones upstream on random input
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_matrix(&mut rng, 4, 4);
        let mut g = Graph::new();
        let x = g.input(m);
        let y = g.sort_rows_asc(x);
        for i in 0..4 {
            let row = g.value(y).row(i);
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Matrix::filled(4, 4, 1.0));
    }

    #[test]
    fn sort_rows_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_matrix(&mut rng, 4, 4);
        let err = grad_check(
            |g, n| {
                let y = g.sort_rows_asc(n);
                let y = g.square(y);
                Ok(g.sum_all(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn elementwise_ops() {
        let mut g = Graph::new();
        let x = g.input(Matrix::filled(1, 1, -2.0));
        let y = g.square(x);
        assert_eq!(g.scalar(y), 4.0);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().get(0, 0), -4.0);

        // abs subgradient at zero is zero
        let mut g = Graph::new();
        let x = g.input(Matrix::zeros(1, 1));
        let y = g.abs_elem(x);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn composite_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 3, 3);
        let b = random_matrix(&mut rng, 3, 3);
        let err = grad_check_multi(
            &|g: &mut Graph, ns: &[Node]| {
                let d = g.sub(ns[0], ns[1])?;
                let d = g.square(d);
                Ok(g.sum_all(d))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn gather_transpose_unitnorm_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_matrix(&mut rng, 4, 3);
        let err = grad_check(
            |g, n| {
                let t = g.transpose(n);
                let gat = g.row_gather(t, &[2, 0, 1, 2])?;
                let sq = g.square(gat);
                Ok(g.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");

        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(0.2..1.5)).collect();
        let x = Matrix::from_vec(4, 3, data).unwrap();
        let err = grad_check(
            |g, n| {
                let u = g.row_unit_normalize(n)?;
                let w = g.exp_elem(u)?;
                Ok(g.sum_all(w))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn sum_rows_cols_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(&mut rng, 3, 4);
        let err = grad_check(
            |g, n| {
                let r = g.sum_rows(n);
                let r2 = g.square(r);
                let c = g.sum_cols(n);
                let c2 = g.square(c);
                let sr = g.sum_all(r2);
                let sc = g.sum_all(c2);
                g.add(sr, sc)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn gradcheck_linear_function_near_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_matrix(&mut rng, 3, 3);
        let err = grad_check(|g, n| Ok(g.sum_all(n)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err={err}");
    }

    #[test]
    fn gradcheck_negative_control_detects_wrong_gradient() {
        // FD gradient of f(x)=sum(x^2)+0.1*sum(x) vs the analytic gradient of
        // g(x)=sum(x^2): the suite must flag the 0.1 discrepancy.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(&mut rng, 3, 3);
        let f = |g: &mut Graph, ns: &[Node]| {
            let sq = g.square(ns[0]);
            let s1 = g.sum_all(sq);
            let lin = g.sum_all(ns[0]);
            let lin = g.scalar_mul(lin, 0.1);
            g.add(s1, lin)
        };
        let fd = fd_gradient(&f, std::slice::from_ref(&x), 1e-5).unwrap();
        let mut g = Graph::new();
        let n = g.input(x.clone());
        let sq = g.square(n);
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        let analytic = g.grad(n).unwrap();
        let mut max_err = 0.0f64;
        for (a, d) in analytic.as_slice().iter().zip(fd[0].as_slice()) {
            max_err = max_err.max((a - d).abs() / f64::max(1.0, d.abs()));
        }
        assert!(max_err > 1e-2, "negative control too small: {max_err}");
    }

    #[test]
    fn deterministic_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_matrix(&mut rng, 5, 5);
        let run = |m: &Matrix| {
            let mut g = Graph::new();
            let n = g.input(m.clone());
            let e = g.exp_elem(n).unwrap();
            let r = g.row_normalize(e).unwrap();
            let c = g.col_normalize(r).unwrap();
            let s = g.sum_all(c);
            g.scalar(s)
        };
        assert_eq!(run(&x).to_bits(), run(&x).to_bits());
    }
}
