//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Backward passes record their own operations onto the same tape, so every
//! gradient is itself a differentiable expression. Differentiating the input
//! gradient of a network with respect to its weights is a second call to
//! [`Tape::grad`] on a loss built from the first gradient.
//!
//! Values are always 2-D: a batch of row vectors, a `1 x m` row (biases,
//! gains) or an `n x 1` column (per-row scalars).

use ndarray::{Array2, Axis};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// `op(a) * op(b)` where `op` optionally transposes.
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `n x m` plus a `1 x m` row.
    AddRow(Var, Var),
    /// `n x m` times a `1 x m` row.
    MulRow(Var, Var),
    /// `n x m` times an `n x 1` column.
    MulCol(Var, Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    /// `(x + eps)^(-1/2)`
    Rsqrt(Var),
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul { a, b, .. } => [Some(a), Some(b)],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) | MulCol(a, b) => {
                [Some(a), Some(b)]
            }
            SumRows(a)
            | SumCols(a)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | Scale(a, _)
            | AddScalar(a)
            | Sigmoid(a)
            | Rsqrt(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Append-only computation record. Node order is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, fill: f64) -> Var {
        self.leaf(Array2::from_elem((rows, cols), fill))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let av = if ta { av.t() } else { av.view() };
        let bv = if tb { bv.t() } else { bv.view() };
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimension");
        let value = av.dot(&bv);
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "add_row shape");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "mul_row shape");
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "mul_col shape");
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::SumRows(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let c = self.sum_cols(a);
        self.sum_rows(c)
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let (r, m) = self.shape(a);
        assert_eq!(r, 1, "broadcast_rows expects a row");
        let value = self.value(a).broadcast((n, m)).unwrap().to_owned();
        self.push(value, Op::BroadcastRows(a))
    }

    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Var {
        let (n, c) = self.shape(a);
        assert_eq!(c, 1, "broadcast_cols expects a column");
        let value = self.value(a).broadcast((n, m)).unwrap().to_owned();
        self.push(value, Op::BroadcastCols(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn rsqrt(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (x + eps).sqrt());
        self.push(value, Op::Rsqrt(a))
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    /// Row-wise standardization (no affine part).
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (_, m) = self.shape(x);
        let inv_m = 1.0 / m as f64;
        let sum = self.sum_cols(x);
        let mean = self.scale(sum, inv_m);
        let mean = self.broadcast_cols(mean, m);
        let centered = self.sub(x, mean);
        let sq = self.mul(centered, centered);
        let var = self.sum_cols(sq);
        let var = self.scale(var, inv_m);
        let inv_std = self.rsqrt(var, eps);
        self.mul_col(centered, inv_std)
    }

    /// Gradients of the `1 x 1` node `output` with respect to `wrt`.
    ///
    /// The returned handles are ordinary tape nodes and can be differentiated
    /// again. Inputs that `output` does not depend on get a zero leaf.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(output), (1, 1), "grad needs a scalar output");
        let seed = self.constant(1, 1, 1.0);
        self.grad_seeded(output, seed, wrt)
    }

    /// Vector-Jacobian product: backpropagates `seed` (shaped like `output`).
    pub fn grad_seeded(&mut self, output: Var, seed: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(output), self.shape(seed), "seed shape");
        let end = output.0 + 1;
        let Some(start) = wrt.iter().map(|v| v.0).min() else {
            return Vec::new();
        };

        // Nodes on some path from a `wrt` input.
        let mut reach = vec![false; end];
        for w in wrt {
            if w.0 < end {
                reach[w.0] = true;
            }
        }
        for i in start..end {
            if !reach[i] {
                reach[i] = self.nodes[i]
                    .op
                    .parents()
                    .iter()
                    .flatten()
                    .any(|p| reach[p.0]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        adj[output.0] = Some(seed);
        for i in (start..end).rev() {
            let Some(dy) = adj[i] else { continue };
            if !reach[i] {
                continue;
            }
            let op = self.nodes[i].op;
            let want = |v: Var| reach[v.0];
            let y = Var(i);
            let mut contribs: [Option<(Var, Var)>; 2] = [None, None];
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, ta, tb } => {
                    if want(a) {
                        let da = if ta {
                            self.matmul_t(b, dy, tb, true)
                        } else {
                            self.matmul_t(dy, b, false, !tb)
                        };
                        contribs[0] = Some((a, da));
                    }
                    if want(b) {
                        let db = if tb {
                            self.matmul_t(dy, a, true, ta)
                        } else {
                            self.matmul_t(a, dy, !ta, false)
                        };
                        contribs[1] = Some((b, db));
                    }
                }
                Op::Add(a, b) => {
                    if want(a) {
                        contribs[0] = Some((a, dy));
                    }
                    if want(b) {
                        contribs[1] = Some((b, dy));
                    }
                }
                Op::Sub(a, b) => {
                    if want(a) {
                        contribs[0] = Some((a, dy));
                    }
                    if want(b) {
                        contribs[1] = Some((b, self.scale(dy, -1.0)));
                    }
                }
                Op::Mul(a, b) => {
                    if want(a) {
                        contribs[0] = Some((a, self.mul(dy, b)));
                    }
                    if want(b) {
                        contribs[1] = Some((b, self.mul(dy, a)));
                    }
                }
                Op::AddRow(a, row) => {
                    if want(a) {
                        contribs[0] = Some((a, dy));
                    }
                    if want(row) {
                        contribs[1] = Some((row, self.sum_rows(dy)));
                    }
                }
                Op::MulRow(a, row) => {
                    if want(a) {
                        contribs[0] = Some((a, self.mul_row(dy, row)));
                    }
                    if want(row) {
                        let p = self.mul(dy, a);
                        contribs[1] = Some((row, self.sum_rows(p)));
                    }
                }
                Op::MulCol(a, col) => {
                    if want(a) {
                        contribs[0] = Some((a, self.mul_col(dy, col)));
                    }
                    if want(col) {
                        let p = self.mul(dy, a);
                        contribs[1] = Some((col, self.sum_cols(p)));
                    }
                }
                Op::SumRows(a) => {
                    let n = self.shape(a).0;
                    contribs[0] = Some((a, self.broadcast_rows(dy, n)));
                }
                Op::SumCols(a) => {
                    let m = self.shape(a).1;
                    contribs[0] = Some((a, self.broadcast_cols(dy, m)));
                }
                Op::BroadcastRows(a) => contribs[0] = Some((a, self.sum_rows(dy))),
                Op::BroadcastCols(a) => contribs[0] = Some((a, self.sum_cols(dy))),
                Op::Scale(a, c) => contribs[0] = Some((a, self.scale(dy, c))),
                Op::AddScalar(a) => contribs[0] = Some((a, dy)),
                Op::Sigmoid(a) => {
                    // s * (1 - s)
                    let one_minus = self.scale(y, -1.0);
                    let one_minus = self.add_scalar(one_minus, 1.0);
                    let ds = self.mul(y, one_minus);
                    contribs[0] = Some((a, self.mul(dy, ds)));
                }
                Op::Rsqrt(a) => {
                    // d/dx (x + eps)^(-1/2) = -y^3 / 2
                    let y2 = self.mul(y, y);
                    let y3 = self.mul(y2, y);
                    let d = self.scale(y3, -0.5);
                    contribs[0] = Some((a, self.mul(dy, d)));
                }
            }
            for (parent, g) in contribs.into_iter().flatten() {
                adj[parent.0] = Some(match adj[parent.0] {
                    Some(prev) => self.add(prev, g),
                    None => g,
                });
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(r, c, 0.0)
                }
            })
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
