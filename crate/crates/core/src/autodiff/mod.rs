//! Reverse-mode differentiation over a tape of dense 2-D arrays.
//!
//! Every primitive knows two adjoints: a numeric one used by [`Tape::backward`]
//! and a recorded one used by [`Tape::grad`]. The recorded adjoint is built
//! only from primitives of this module, so the result of `grad` is an ordinary
//! node and can be differentiated again.

mod check;
mod kernels;
mod mat;

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

pub use check::{finite_diff_check, numeric_gradient};
pub use mat::Mat;

use crate::{Error, Result};

/// Epsilon inside the square root of [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Node {
    tape: u32,
    index: u32,
}

impl Node {
    /// Position on the owning tape.
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Affine {
        x: usize,
        scale: f64,
        shift: f64,
    },
    Mul(usize, usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        a_shape: (usize, usize),
        b_shape: (usize, usize),
        ta: bool,
        tb: bool,
    },
    Reshape {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Concat(Arc<[usize]>),
    Slice {
        x: usize,
        start: usize,
        len: usize,
    },
    Embed {
        x: usize,
        start: usize,
        total: usize,
    },
    Gather {
        x: usize,
        index: Arc<[usize]>,
    },
    ScatterAdd {
        x: usize,
        index: Arc<[usize]>,
        rows: usize,
    },
    SumRows(usize),
    BroadcastRows {
        x: usize,
        rows: usize,
    },
    SumCols(usize),
    BroadcastCols {
        x: usize,
        cols: usize,
    },
    Sum(usize),
    Inner(usize, usize),
    Sigmoid(usize),
    Silu(usize),
    Abs(usize),
    Powf {
        x: usize,
        p: f64,
    },
    LayerNorm(usize),
    Detach(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Mul(a, b) | Inner(a, b) => vec![*a, *b],
            MatMul { a, b, .. } | BatchMatMul { a, b, .. } => vec![*a, *b],
            Concat(parts) => parts.to_vec(),
            Affine { x, .. }
            | Reshape { x, .. }
            | Slice { x, .. }
            | Embed { x, .. }
            | Gather { x, .. }
            | ScatterAdd { x, .. }
            | BroadcastRows { x, .. }
            | BroadcastCols { x, .. }
            | Powf { x, .. } => vec![*x],
            SumRows(x) | SumCols(x) | Sum(x) | Sigmoid(x) | Silu(x) | Abs(x) | LayerNorm(x) => {
                vec![*x]
            }
            // A detached node has no differentiable inputs.
            Detach(_) => Vec::new(),
        }
    }
}

struct Record {
    op: Op,
    value: Mat,
    differentiable: bool,
}

/// Append-only computation record.
///
/// Nodes are stored in creation order, so every input precedes its
/// consumers. A tape is meant to live on one thread; independent tapes can be
/// used concurrently.
pub struct Tape {
    id: u32,
    nodes: Vec<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn eval(op: &Op, nodes: &[Record]) -> Mat {
    use Op::*;
    let v = |i: usize| &nodes[i].value;
    match op {
        Leaf => unreachable!("leaves carry their own value"),
        Add(a, b) => v(*a).zip_map(v(*b), |x, y| x + y),
        Affine { x, scale, shift } => {
            let (s, c) = (*scale, *shift);
            v(*x).map(|t| s * t + c)
        }
        Mul(a, b) => v(*a).zip_map(v(*b), |x, y| x * y),
        MatMul { a, b, ta, tb } => kernels::matmul(v(*a), v(*b), *ta, *tb),
        BatchMatMul {
            a,
            b,
            a_shape,
            b_shape,
            ta,
            tb,
        } => kernels::batch_matmul(v(*a), *a_shape, *ta, v(*b), *b_shape, *tb),
        Reshape { x, rows, cols } => v(*x).clone().reshaped(*rows, *cols),
        Concat(parts) => {
            let mats: Vec<&Mat> = parts.iter().map(|&p| v(p)).collect();
            kernels::concat_cols(&mats)
        }
        Slice { x, start, len } => kernels::slice_cols(v(*x), *start, *len),
        Embed { x, start, total } => kernels::embed_cols(v(*x), *start, *total),
        Gather { x, index } => kernels::gather_rows(v(*x), index),
        ScatterAdd { x, index, rows } => kernels::scatter_add_rows(v(*x), index, *rows),
        SumRows(x) => kernels::sum_rows(v(*x)),
        BroadcastRows { x, rows } => kernels::broadcast_rows(v(*x), *rows),
        SumCols(x) => kernels::sum_cols(v(*x)),
        BroadcastCols { x, cols } => kernels::broadcast_cols(v(*x), *cols),
        Sum(x) => Mat::scalar(v(*x).data().iter().sum()),
        Inner(a, b) => Mat::scalar(v(*a).data().iter().zip(v(*b).data()).map(|(x, y)| x * y).sum()),
        Sigmoid(x) => v(*x).map(kernels::sigmoid),
        Silu(x) => v(*x).map(|t| t * kernels::sigmoid(t)),
        Abs(x) => v(*x).map(f64::abs),
        Powf { x, p } => {
            let p = *p;
            v(*x).map(|t| t.powf(p))
        }
        LayerNorm(x) => kernels::layer_norm(v(*x), LAYER_NORM_EPS),
        Detach(x) => v(*x).clone(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, n: Node) -> Result<usize> {
        if n.tape != self.id {
            return Err(Error::Usage("node belongs to a different tape".into()));
        }
        Ok(n.index as usize)
    }

    fn handle(&self, index: usize) -> Node {
        Node {
            tape: self.id,
            index: index as u32,
        }
    }

    fn val(&self, i: usize) -> &Mat {
        &self.nodes[i].value
    }

    /// Current value of `n`.
    ///
    /// # Panics
    /// If `n` was created on another tape.
    pub fn value(&self, n: Node) -> &Mat {
        assert_eq!(n.tape, self.id, "node belongs to a different tape");
        self.val(n.index())
    }

    pub fn shape(&self, n: Node) -> (usize, usize) {
        self.value(n).shape()
    }

    /// True if `n` depends on a differentiable leaf.
    pub fn is_differentiable(&self, n: Node) -> bool {
        n.tape == self.id && self.nodes[n.index()].differentiable
    }

    fn push_leaf(&mut self, value: Mat, differentiable: bool) -> usize {
        self.nodes.push(Record {
            op: Op::Leaf,
            value,
            differentiable,
        });
        self.nodes.len() - 1
    }

    /// Append `op`, computing its value. Inputs are trusted.
    fn push(&mut self, op: Op) -> usize {
        let value = eval(&op, &self.nodes);
        let differentiable = op.inputs().iter().any(|&i| self.nodes[i].differentiable);
        self.nodes.push(Record {
            op,
            value,
            differentiable,
        });
        self.nodes.len() - 1
    }

    fn emit(&mut self, op: Op) -> Node {
        let i = self.push(op);
        self.handle(i)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(&mut self, value: Mat) -> Node {
        let i = self.push_leaf(value, true);
        self.handle(i)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&mut self, value: Mat) -> Node {
        let i = self.push_leaf(value, false);
        self.handle(i)
    }

    /// Replace the value of a leaf. Call [`Tape::recompute`] afterwards.
    pub fn set_leaf(&mut self, n: Node, value: Mat) -> Result<()> {
        let i = self.idx(n)?;
        let rec = &mut self.nodes[i];
        if !matches!(rec.op, Op::Leaf) {
            return Err(Error::Usage(format!("node {i} is not a leaf")));
        }
        if rec.value.shape() != value.shape() {
            return Err(Error::param(format!(
                "leaf shape {:?} cannot take a {:?} value",
                rec.value.shape(),
                value.shape()
            )));
        }
        rec.value = value;
        Ok(())
    }

    /// Re-evaluate every non-leaf node from the current leaf values.
    pub fn recompute(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = eval(&self.nodes[i].op, &self.nodes[..i]);
            self.nodes[i].value = value;
        }
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::param(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(a, b, "add")?;
        Ok(self.emit(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Node, scale: f64, shift: f64) -> Result<Node> {
        let x = self.idx(x)?;
        Ok(self.emit(Op::Affine { x, scale, shift }))
    }

    pub fn scale(&mut self, x: Node, k: f64) -> Result<Node> {
        self.affine(x, k, 0.0)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(a, b, "mul")?;
        Ok(self.emit(Op::Mul(a, b)))
    }

    /// Multiply every entry of `x` by the `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, x: Node, s: Node) -> Result<Node> {
        if self.shape(s) != (1, 1) {
            return Err(Error::param("mul_scalar expects a 1×1 factor"));
        }
        let (r, c) = self.shape(x);
        let b = self.broadcast_cols(s, c)?;
        let b = self.broadcast_rows(b, r)?;
        self.mul(x, b)
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)`, where `ta`/`tb` select transposition.
    pub fn matmul_t(&mut self, a: Node, b: Node, ta: bool, tb: bool) -> Result<Node> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let k1 = if ta { self.val(ai).rows() } else { self.val(ai).cols() };
        let k2 = if tb { self.val(bi).cols() } else { self.val(bi).rows() };
        if k1 != k2 {
            return Err(Error::param(format!(
                "matmul: inner dimensions {k1} and {k2} differ"
            )));
        }
        Ok(self.emit(Op::MatMul { a: ai, b: bi, ta, tb }))
    }

    /// Row-wise product of small matrices.
    ///
    /// Row `r` of `a` is read as an `a_shape` matrix and row `r` of `b` as a
    /// `b_shape` matrix (both row-major). Row `r` of the result holds
    /// `op(a_r) · op(b_r)`.
    pub fn batch_matmul(
        &mut self,
        a: Node,
        a_shape: (usize, usize),
        ta: bool,
        b: Node,
        b_shape: (usize, usize),
        tb: bool,
    ) -> Result<Node> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (self.val(ai), self.val(bi));
        if va.rows() != vb.rows() {
            return Err(Error::param("batch_matmul: row counts differ"));
        }
        if va.cols() != a_shape.0 * a_shape.1 || vb.cols() != b_shape.0 * b_shape.1 {
            return Err(Error::param("batch_matmul: row width does not match the block shape"));
        }
        let k1 = if ta { a_shape.0 } else { a_shape.1 };
        let k2 = if tb { b_shape.1 } else { b_shape.0 };
        if k1 != k2 {
            return Err(Error::param(format!(
                "batch_matmul: inner dimensions {k1} and {k2} differ"
            )));
        }
        Ok(self.emit(Op::BatchMatMul {
            a: ai,
            b: bi,
            a_shape,
            b_shape,
            ta,
            tb,
        }))
    }

    /// Reinterpret the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Node, rows: usize, cols: usize) -> Result<Node> {
        let xi = self.idx(x)?;
        if self.val(xi).len() != rows * cols {
            return Err(Error::param(format!(
                "reshape: {} values into {rows}×{cols}",
                self.val(xi).len()
            )));
        }
        Ok(self.emit(Op::Reshape { x: xi, rows, cols }))
    }

    /// Concatenate along columns.
    pub fn concat_cols(&mut self, parts: &[Node]) -> Result<Node> {
        if parts.is_empty() {
            return Err(Error::param("concat of nothing"));
        }
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let rows = self.val(idx[0]).rows();
        if idx.iter().any(|&i| self.val(i).rows() != rows) {
            return Err(Error::param("concat: row counts differ"));
        }
        Ok(self.emit(Op::Concat(idx.into())))
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&mut self, x: Node, start: usize, len: usize) -> Result<Node> {
        let xi = self.idx(x)?;
        if start + len > self.val(xi).cols() {
            return Err(Error::param(format!(
                "slice {start}..{} of {} columns",
                start + len,
                self.val(xi).cols()
            )));
        }
        Ok(self.emit(Op::Slice { x: xi, start, len }))
    }

    /// Place `x` at column offset `start` of a zero matrix with `total` columns.
    pub fn embed_cols(&mut self, x: Node, start: usize, total: usize) -> Result<Node> {
        let xi = self.idx(x)?;
        if start + self.val(xi).cols() > total {
            return Err(Error::param("embed: block does not fit"));
        }
        Ok(self.emit(Op::Embed { x: xi, start, total }))
    }

    /// Row `k` of the result is row `index[k]` of `x`.
    pub fn gather_rows(&mut self, x: Node, index: Arc<[usize]>) -> Result<Node> {
        let xi = self.idx(x)?;
        let rows = self.val(xi).rows();
        if index.iter().any(|&i| i >= rows) {
            return Err(Error::param("gather: row index out of range"));
        }
        Ok(self.emit(Op::Gather { x: xi, index }))
    }

    /// Row `k` of `x` is added into row `index[k]` of a `rows`-row result.
    pub fn scatter_add_rows(&mut self, x: Node, index: Arc<[usize]>, rows: usize) -> Result<Node> {
        let xi = self.idx(x)?;
        if index.len() != self.val(xi).rows() {
            return Err(Error::param("scatter: index length differs from row count"));
        }
        if index.iter().any(|&i| i >= rows) {
            return Err(Error::param("scatter: target row out of range"));
        }
        Ok(self.emit(Op::ScatterAdd { x: xi, index, rows }))
    }

    /// Column sums as a `1 × cols` row.
    pub fn sum_rows(&mut self, x: Node) -> Result<Node> {
        let xi = self.idx(x)?;
        Ok(self.emit(Op::SumRows(xi)))
    }

    /// Repeat a `1 × c` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Node, rows: usize) -> Result<Node> {
        let xi = self.idx(x)?;
        if self.val(xi).rows() != 1 {
            return Err(Error::param("broadcast_rows expects a single row"));
        }
        Ok(self.emit(Op::BroadcastRows { x: xi, rows }))
    }

    /// Row sums as a `rows × 1` column.
    pub fn sum_cols(&mut self, x: Node) -> Result<Node> {
        let xi = self.idx(x)?;
        Ok(self.emit(Op::SumCols(xi)))
    }

    /// Repeat an `r × 1` column `cols` times.
    pub fn broadcast_cols(&mut self, x: Node, cols: usize) -> Result<Node> {
        let xi = self.idx(x)?;
        if self.val(xi).cols() != 1 {
            return Err(Error::param("broadcast_cols expects a single column"));
        }
        Ok(self.emit(Op::BroadcastCols { x: xi, cols }))
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, x: Node) -> Result<Node> {
        let xi = self.idx(x)?;
        Ok(self.emit(Op::Sum(xi)))
    }

    pub fn mean(&mut self, x: Node) -> Result<Node> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of elementwise products as a `1 × 1` node.
    pub fn inner(&mut self, a: Node, b: Node) -> Result<Node> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(a, b, "inner")?;
        Ok(self.emit(Op::Inner(a, b)))
    }

    pub fn sigmoid(&mut self, x: Node) -> Result<Node> {
        let xi = self.idx(x)?;
        Ok(self.emit(Op::Sigmoid(xi)))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Node) -> Result<Node> {
        let xi = self.idx(x)?;
        Ok(self.emit(Op::Silu(xi)))
    }

    pub fn abs(&mut self, x: Node) -> Result<Node> {
        let xi = self.idx(x)?;
        Ok(self.emit(Op::Abs(xi)))
    }

    /// Elementwise `x^p`.
    pub fn powf(&mut self, x: Node, p: f64) -> Result<Node> {
        let xi = self.idx(x)?;
        Ok(self.emit(Op::Powf { x: xi, p }))
    }

    /// Row-wise standardisation without gain or bias.
    pub fn layer_norm(&mut self, x: Node) -> Result<Node> {
        let xi = self.idx(x)?;
        if self.val(xi).cols() == 0 {
            return Err(Error::param("layer_norm of an empty row"));
        }
        Ok(self.emit(Op::LayerNorm(xi)))
    }

    /// Same value, no gradient flows through.
    pub fn detach(&mut self, x: Node) -> Result<Node> {
        let xi = self.idx(x)?;
        Ok(self.emit(Op::Detach(xi)))
    }

    /// Add a `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: Node, row: Node) -> Result<Node> {
        let r = self.shape(x).0;
        let b = self.broadcast_rows(row, r)?;
        self.add(x, b)
    }

    /// `x · w + b` with `b` a `1 × out` row.
    pub fn linear(&mut self, x: Node, w: Node, b: Node) -> Result<Node> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // Unchecked helpers used while recording adjoints.

    fn r_bcast_scalar(&mut self, s: usize, rows: usize, cols: usize) -> usize {
        let c = self.push(Op::BroadcastCols { x: s, cols });
        self.push(Op::BroadcastRows { x: c, rows })
    }

    fn r_row_mean(&mut self, x: usize, n: usize) -> usize {
        let s = self.push(Op::SumCols(x));
        let m = self.push(Op::Affine {
            x: s,
            scale: 1.0 / n as f64,
            shift: 0.0,
        });
        self.push(Op::BroadcastCols { x: m, cols: n })
    }

    /// Recorded vector-Jacobian products of node `out` given its adjoint `g`.
    /// Only inputs flagged in `want` are produced.
    fn recorded_vjp(&mut self, out: usize, g: usize, want: &dyn Fn(usize) -> bool) -> Vec<(usize, usize)> {
        use Op::*;
        let op = self.nodes[out].op.clone();
        let mut res = Vec::new();
        match op {
            Leaf | Detach(_) => {}
            Add(a, b) => {
                if want(a) {
                    res.push((a, g));
                }
                if want(b) {
                    res.push((b, g));
                }
            }
            Affine { x, scale, .. } => {
                if want(x) {
                    res.push((x, self.push(Affine { x: g, scale, shift: 0.0 })));
                }
            }
            Mul(a, b) => {
                if want(a) {
                    res.push((a, self.push(Mul(g, b))));
                }
                if want(b) {
                    res.push((b, self.push(Mul(g, a))));
                }
            }
            MatMul { a, b, ta, tb } => {
                if want(a) {
                    let ga = if !ta {
                        self.push(MatMul { a: g, b, ta: false, tb: !tb })
                    } else {
                        self.push(MatMul { a: b, b: g, ta: tb, tb: true })
                    };
                    res.push((a, ga));
                }
                if want(b) {
                    let gb = if !tb {
                        self.push(MatMul { a, b: g, ta: !ta, tb: false })
                    } else {
                        self.push(MatMul { a: g, b: a, ta: true, tb: ta })
                    };
                    res.push((b, gb));
                }
            }
            BatchMatMul {
                a,
                b,
                a_shape,
                b_shape,
                ta,
                tb,
            } => {
                let m = if ta { a_shape.1 } else { a_shape.0 };
                let n = if tb { b_shape.0 } else { b_shape.1 };
                let g_shape = (m, n);
                if want(a) {
                    let ga = if !ta {
                        self.push(BatchMatMul {
                            a: g,
                            b,
                            a_shape: g_shape,
                            b_shape,
                            ta: false,
                            tb: !tb,
                        })
                    } else {
                        self.push(BatchMatMul {
                            a: b,
                            b: g,
                            a_shape: b_shape,
                            b_shape: g_shape,
                            ta: tb,
                            tb: true,
                        })
                    };
                    res.push((a, ga));
                }
                if want(b) {
                    let gb = if !tb {
                        self.push(BatchMatMul {
                            a,
                            b: g,
                            a_shape,
                            b_shape: g_shape,
                            ta: !ta,
                            tb: false,
                        })
                    } else {
                        self.push(BatchMatMul {
                            a: g,
                            b: a,
                            a_shape: g_shape,
                            b_shape: a_shape,
                            ta: true,
                            tb: ta,
                        })
                    };
                    res.push((b, gb));
                }
            }
            Reshape { x, .. } => {
                if want(x) {
                    let (rows, cols) = self.val(x).shape();
                    res.push((x, self.push(Reshape { x: g, rows, cols })));
                }
            }
            Concat(parts) => {
                let mut start = 0;
                for &p in parts.iter() {
                    let len = self.val(p).cols();
                    if want(p) {
                        res.push((p, self.push(Slice { x: g, start, len })));
                    }
                    start += len;
                }
            }
            Slice { x, start, .. } => {
                if want(x) {
                    let total = self.val(x).cols();
                    res.push((x, self.push(Embed { x: g, start, total })));
                }
            }
            Embed { x, start, .. } => {
                if want(x) {
                    let len = self.val(x).cols();
                    res.push((x, self.push(Slice { x: g, start, len })));
                }
            }
            Gather { x, index } => {
                if want(x) {
                    let rows = self.val(x).rows();
                    res.push((x, self.push(ScatterAdd { x: g, index, rows })));
                }
            }
            ScatterAdd { x, index, .. } => {
                if want(x) {
                    res.push((x, self.push(Gather { x: g, index })));
                }
            }
            SumRows(x) => {
                if want(x) {
                    let rows = self.val(x).rows();
                    res.push((x, self.push(BroadcastRows { x: g, rows })));
                }
            }
            BroadcastRows { x, .. } => {
                if want(x) {
                    res.push((x, self.push(SumRows(g))));
                }
            }
            SumCols(x) => {
                if want(x) {
                    let cols = self.val(x).cols();
                    res.push((x, self.push(BroadcastCols { x: g, cols })));
                }
            }
            BroadcastCols { x, .. } => {
                if want(x) {
                    res.push((x, self.push(SumCols(g))));
                }
            }
            Sum(x) => {
                if want(x) {
                    let (r, c) = self.val(x).shape();
                    res.push((x, self.r_bcast_scalar(g, r, c)));
                }
            }
            Inner(a, b) => {
                let (r, c) = self.val(a).shape();
                if want(a) || want(b) {
                    let gb = self.r_bcast_scalar(g, r, c);
                    if want(a) {
                        res.push((a, self.push(Mul(gb, b))));
                    }
                    if want(b) {
                        res.push((b, self.push(Mul(gb, a))));
                    }
                }
            }
            Sigmoid(x) => {
                if want(x) {
                    let one_minus = self.push(Affine {
                        x: out,
                        scale: -1.0,
                        shift: 1.0,
                    });
                    let d = self.push(Mul(out, one_minus));
                    res.push((x, self.push(Mul(g, d))));
                }
            }
            Silu(x) => {
                if want(x) {
                    // d/dx x·s(x) = s + x·s·(1 − s)
                    let s = self.push(Sigmoid(x));
                    let one_minus = self.push(Affine {
                        x: s,
                        scale: -1.0,
                        shift: 1.0,
                    });
                    let xs = self.push(Mul(x, s));
                    let t = self.push(Mul(xs, one_minus));
                    let d = self.push(Add(s, t));
                    res.push((x, self.push(Mul(g, d))));
                }
            }
            Abs(x) => {
                if want(x) {
                    let sign = self.val(x).map(|t| if t > 0.0 { 1.0 } else if t < 0.0 { -1.0 } else { 0.0 });
                    let s = self.push_leaf(sign, false);
                    res.push((x, self.push(Mul(g, s))));
                }
            }
            Powf { x, p } => {
                if want(x) {
                    let q = self.push(Powf { x, p: p - 1.0 });
                    let d = self.push(Affine {
                        x: q,
                        scale: p,
                        shift: 0.0,
                    });
                    res.push((x, self.push(Mul(g, d))));
                }
            }
            LayerNorm(x) => {
                if want(x) {
                    // gx = rstd ⊙ (g − mean(g) − y ⊙ mean(g ⊙ y)), row-wise.
                    let n = self.val(x).cols();
                    let y = out;
                    let gm = self.r_row_mean(g, n);
                    let gy = self.push(Mul(g, y));
                    let gym = self.r_row_mean(gy, n);
                    let ygym = self.push(Mul(y, gym));
                    let t = self.push(Affine {
                        x: gm,
                        scale: -1.0,
                        shift: 0.0,
                    });
                    let t = self.push(Add(g, t));
                    let u = self.push(Affine {
                        x: ygym,
                        scale: -1.0,
                        shift: 0.0,
                    });
                    let inner = self.push(Add(t, u));

                    let xm = self.r_row_mean(x, n);
                    let nxm = self.push(Affine {
                        x: xm,
                        scale: -1.0,
                        shift: 0.0,
                    });
                    let c = self.push(Add(x, nxm));
                    let c2 = self.push(Mul(c, c));
                    let s = self.push(SumCols(c2));
                    let var = self.push(Affine {
                        x: s,
                        scale: 1.0 / n as f64,
                        shift: LAYER_NORM_EPS,
                    });
                    let rstd = self.push(Powf { x: var, p: -0.5 });
                    let rstd = self.push(BroadcastCols { x: rstd, cols: n });
                    res.push((x, self.push(Mul(rstd, inner))));
                }
            }
        }
        res
    }

    /// Adjoints of the scalar `output` with respect to `wrt`, recorded on the
    /// tape so they can be differentiated again.
    ///
    /// Inputs that `output` does not depend on receive a zero constant.
    pub fn grad(&mut self, output: Node, wrt: &[Node]) -> Result<Vec<Node>> {
        let out = self.idx(output)?;
        if self.val(out).shape() != (1, 1) {
            return Err(Error::param(format!(
                "grad needs a scalar output, got {:?}",
                self.val(out).shape()
            )));
        }
        let targets = wrt.iter().map(|&w| self.idx(w)).collect::<Result<Vec<_>>>()?;
        let Some(&lo) = targets.iter().min() else {
            return Ok(Vec::new());
        };
        let mut adj: Vec<Option<usize>> = Vec::new();
        if lo <= out {
            // Forward mask: nodes in lo..=out that depend on a target.
            let span = out + 1 - lo;
            let mut dep = vec![false; span];
            for &t in &targets {
                dep[t - lo] = true;
            }
            for i in lo..=out {
                if dep[i - lo] {
                    continue;
                }
                dep[i - lo] = self.nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .any(|&j| j >= lo && dep[j - lo]);
            }
            adj = vec![None; span];
            let seed = self.push_leaf(Mat::scalar(1.0), false);
            adj[out - lo] = Some(seed);
            for i in (lo..=out).rev() {
                if !dep[i - lo] {
                    continue;
                }
                let Some(g) = adj[i - lo] else { continue };
                let want = |j: usize| j >= lo && dep[j - lo];
                for (j, gj) in self.recorded_vjp(i, g, &want) {
                    let slot = &mut adj[j - lo];
                    *slot = Some(match *slot {
                        None => gj,
                        Some(prev) => self.push(Op::Add(prev, gj)),
                    });
                }
            }
        }
        let mut result = Vec::with_capacity(targets.len());
        for &t in &targets {
            let node = match adj.get(t.wrapping_sub(lo)).copied().flatten() {
                Some(a) if t <= out => a,
                _ => {
                    let (r, c) = self.val(t).shape();
                    self.push_leaf(Mat::zeros(r, c), false)
                }
            };
            result.push(self.handle(node));
        }
        Ok(result)
    }

    /// Numeric adjoints of the scalar `output` with respect to `wrt`.
    ///
    /// Nothing is recorded; this is the fast path for parameter gradients.
    pub fn backward(&self, output: Node, wrt: &[Node]) -> Result<Vec<Mat>> {
        let out = self.idx(output)?;
        if self.val(out).shape() != (1, 1) {
            return Err(Error::param(format!(
                "backward needs a scalar output, got {:?}",
                self.val(out).shape()
            )));
        }
        let targets = wrt.iter().map(|&w| self.idx(w)).collect::<Result<Vec<_>>>()?;
        let mut keep = vec![false; out + 1];
        for &t in &targets {
            if t <= out {
                keep[t] = true;
            }
        }
        let mut adj: Vec<Option<Mat>> = vec![None; out + 1];
        let mut result: Vec<Option<Mat>> = vec![None; targets.len()];
        adj[out] = Some(Mat::scalar(1.0));
        for i in (0..=out).rev() {
            if !self.nodes[i].differentiable {
                adj[i] = None;
                continue;
            }
            let g = if keep[i] { adj[i].clone() } else { adj[i].take() };
            let Some(g) = g else { continue };
            for (j, gj) in self.numeric_vjp(i, &g) {
                if !self.nodes[j].differentiable {
                    continue;
                }
                match &mut adj[j] {
                    Some(prev) => prev.add_assign(&gj),
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        for (k, &t) in targets.iter().enumerate() {
            result[k] = if t <= out { adj[t].take().or_else(|| result_lookup(&targets, &result, t)) } else { None };
        }
        Ok(targets
            .iter()
            .zip(result)
            .map(|(&t, r)| r.unwrap_or_else(|| {
                let (rows, cols) = self.val(t).shape();
                Mat::zeros(rows, cols)
            }))
            .collect())
    }

    fn numeric_vjp(&self, out: usize, g: &Mat) -> Vec<(usize, Mat)> {
        use Op::*;
        let v = |i: usize| self.val(i);
        match &self.nodes[out].op {
            Leaf | Detach(_) => Vec::new(),
            Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Affine { x, scale, .. } => {
                let s = *scale;
                vec![(*x, g.map(|t| s * t))]
            }
            Mul(a, b) => vec![(*a, g.zip_map(v(*b), |p, q| p * q)), (*b, g.zip_map(v(*a), |p, q| p * q))],
            MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let mut r = Vec::with_capacity(2);
                if self.nodes[a].differentiable {
                    let ga = if !ta {
                        kernels::matmul(g, v(b), false, !tb)
                    } else {
                        kernels::matmul(v(b), g, tb, true)
                    };
                    r.push((a, ga));
                }
                if self.nodes[b].differentiable {
                    let gb = if !tb {
                        kernels::matmul(v(a), g, !ta, false)
                    } else {
                        kernels::matmul(g, v(a), true, ta)
                    };
                    r.push((b, gb));
                }
                r
            }
            BatchMatMul {
                a,
                b,
                a_shape,
                b_shape,
                ta,
                tb,
            } => {
                let (a, b, a_shape, b_shape, ta, tb) = (*a, *b, *a_shape, *b_shape, *ta, *tb);
                let m = if ta { a_shape.1 } else { a_shape.0 };
                let n = if tb { b_shape.0 } else { b_shape.1 };
                let gs = (m, n);
                let mut r = Vec::with_capacity(2);
                if self.nodes[a].differentiable {
                    let ga = if !ta {
                        kernels::batch_matmul(g, gs, false, v(b), b_shape, !tb)
                    } else {
                        kernels::batch_matmul(v(b), b_shape, tb, g, gs, true)
                    };
                    r.push((a, ga));
                }
                if self.nodes[b].differentiable {
                    let gb = if !tb {
                        kernels::batch_matmul(v(a), a_shape, !ta, g, gs, false)
                    } else {
                        kernels::batch_matmul(g, gs, true, v(a), a_shape, ta)
                    };
                    r.push((b, gb));
                }
                r
            }
            Reshape { x, .. } => {
                let (rows, cols) = v(*x).shape();
                vec![(*x, g.clone().reshaped(rows, cols))]
            }
            Concat(parts) => {
                let mut start = 0;
                let mut r = Vec::with_capacity(parts.len());
                for &p in parts.iter() {
                    let len = v(p).cols();
                    r.push((p, kernels::slice_cols(g, start, len)));
                    start += len;
                }
                r
            }
            Slice { x, start, .. } => vec![(*x, kernels::embed_cols(g, *start, v(*x).cols()))],
            Embed { x, start, .. } => vec![(*x, kernels::slice_cols(g, *start, v(*x).cols()))],
            Gather { x, index } => vec![(*x, kernels::scatter_add_rows(g, index, v(*x).rows()))],
            ScatterAdd { x, index, .. } => vec![(*x, kernels::gather_rows(g, index))],
            SumRows(x) => vec![(*x, kernels::broadcast_rows(g, v(*x).rows()))],
            BroadcastRows { x, .. } => vec![(*x, kernels::sum_rows(g))],
            SumCols(x) => vec![(*x, kernels::broadcast_cols(g, v(*x).cols()))],
            BroadcastCols { x, .. } => vec![(*x, kernels::sum_cols(g))],
            Sum(x) => {
                let (r, c) = v(*x).shape();
                vec![(*x, Mat::filled(r, c, g.item()))]
            }
            Inner(a, b) => {
                let s = g.item();
                vec![(*a, v(*b).map(|t| s * t)), (*b, v(*a).map(|t| s * t))]
            }
            Sigmoid(x) => {
                let y = v(out);
                vec![(*x, g.zip_map(y, |p, s| p * s * (1.0 - s)))]
            }
            Silu(x) => vec![(
                *x,
                g.zip_map(v(*x), |p, t| {
                    let s = kernels::sigmoid(t);
                    p * (s + t * s * (1.0 - s))
                }),
            )],
            Abs(x) => vec![(
                *x,
                g.zip_map(v(*x), |p, t| if t > 0.0 { p } else if t < 0.0 { -p } else { 0.0 }),
            )],
            Powf { x, p } => {
                let p = *p;
                vec![(*x, g.zip_map(v(*x), |q, t| q * p * t.powf(p - 1.0)))]
            }
            LayerNorm(x) => {
                let y = v(out);
                let n = y.cols();
                let rstd = kernels::layer_norm_rstd(v(*x), LAYER_NORM_EPS);
                let mut gx = Mat::zeros(y.rows(), n);
                for r in 0..y.rows() {
                    let gr = g.row_slice(r);
                    let yr = y.row_slice(r);
                    let gm = gr.iter().sum::<f64>() / n as f64;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    let dst = &mut gx.data_mut()[r * n..(r + 1) * n];
                    for k in 0..n {
                        dst[k] = rstd[r] * (gr[k] - gm - yr[k] * gym);
                    }
                }
                vec![(*x, gx)]
            }
        }
    }
}

fn result_lookup(targets: &[usize], result: &[Option<Mat>], t: usize) -> Option<Mat> {
    // A target listed twice: reuse the adjoint already taken for it.
    targets
        .iter()
        .zip(result)
        .find(|(&u, r)| u == t && r.is_some())
        .and_then(|(_, r)| r.clone())
}
