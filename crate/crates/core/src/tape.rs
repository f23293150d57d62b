//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Tape`] owns every intermediate value. Operations append a node whose
//! inputs always precede it, so the node list is already in topological
//! order and `backward` is a single reverse sweep. Tapes are built fresh for
//! each step and dropped afterwards.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::TensorError;
use crate::tensor::{self, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Operation kinds, exposed for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Exp,
    Log,
    Gelu,
    Clamp,
    Softmax,
    LayerNorm,
    Embedding,
    CrossEntropy,
    Mean,
    Sum,
    SumLastAxis,
    Concat,
    Slice,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize, broadcast: bool },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Gelu { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    Softmax { a: usize, rows: usize, cols: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, cols: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize>, dim: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64>, vocab: usize },
    Mean { a: usize },
    Sum { a: usize },
    SumLastAxis { a: usize, cols: usize },
    Concat { inputs: Vec<usize>, axis: usize, widths: Vec<usize>, rows: usize },
    Slice { a: usize, r0: usize, r1: usize, c0: usize, c1: usize, src_cols: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Exp { .. } => OpKind::Exp,
            Op::Log { .. } => OpKind::Log,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::SumLastAxis { .. } => OpKind::SumLastAxis,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation graph.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.index].op.kind()
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var, TensorError> {
        value.check_finite(name)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.val(ia).dims2("matmul")?;
        let (k2, n) = self.val(ib).dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = tensor::matmul(self.val(ia).data(), self.val(ib).data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul { a: ia, b: ib, m, k, n }, &[ia, ib])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let (rows, cols) = self.val(ia).dims2("transpose")?;
        let out = tensor::transpose(self.val(ia).data(), rows, cols);
        self.push("transpose", Tensor::from_parts(vec![cols, rows], out), Op::Transpose { a: ia, rows, cols }, &[ia])
    }

    /// Elementwise sum. `b` may also be a vector matching the last axis of `a`,
    /// in which case it is added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let broadcast = if ta.shape() == tb.shape() {
            false
        } else if tb.shape().len() == 1 && ta.shape().last() == Some(&tb.shape()[0]) {
            true
        } else {
            return Err(mismatch("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        };
        let mut out = ta.data().to_vec();
        if broadcast {
            let w = tb.len();
            for row in out.chunks_mut(w) {
                for (o, x) in row.iter_mut().zip(tb.data()) {
                    *o += x;
                }
            }
        } else {
            for (o, x) in out.iter_mut().zip(tb.data()) {
                *o += x;
            }
        }
        let shape = ta.shape().to_vec();
        self.push("add", Tensor::from_parts(shape, out), Op::Add { a: ia, b: ib, broadcast }, &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(mismatch("sub", format!("{:?} - {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let shape = ta.shape().to_vec();
        self.push("sub", Tensor::from_parts(shape, out), Op::Sub { a: ia, b: ib }, &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push("mul", Tensor::from_parts(shape, out), Op::Mul { a: ia, b: ib }, &[ia, ib])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let out = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale { a: ia, c }, &[ia])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let out = t.data().iter().map(|x| x + c).collect();
        let shape = t.shape().to_vec();
        self.push("add_scalar", Tensor::from_parts(shape, out), Op::AddScalar { a: ia }, &[ia])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let out = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(name, Tensor::from_parts(shape, out), op(ia), &[ia])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, f64::exp, |a| Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("log", a, f64::ln, |a| Op::Log { a })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("gelu", a, tensor::gelu, |a| Op::Gelu { a })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), |a| Op::Clamp { a, lo, hi })
    }

    /// Softmax over the last axis of a matrix. With `causal`, entry `(i, j)` for
    /// `j > i` is excluded and set to zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let (rows, cols) = match t.shape() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => return Err(mismatch("softmax", format!("rank {} input", s.len()))),
        };
        let out = tensor::softmax_rows(t.data(), rows, cols, causal);
        let shape = t.shape().to_vec();
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { a: ia, rows, cols }, &[ia])
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let (rows, cols) = self.val(ix).dims2("layer_norm")?;
        if self.val(ig).shape() != [cols] || self.val(ib).shape() != [cols] {
            return Err(mismatch("layer_norm", format!("gain/bias must be [{cols}]")));
        }
        let (xd, g, b) = (self.val(ix).data(), self.val(ig).data(), self.val(ib).data());
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(vec![rows, cols], out),
            Op::LayerNorm { x: ix, gain: ig, bias: ib, cols, xhat, rstd },
            &[ix, ig, ib],
        )
    }

    /// Gathers rows of `table` (`[vocab, dim]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let it = self.idx(table)?;
        let (vocab, dim) = self.val(it).dims2("embedding")?;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange { op: "embedding", index: id, size: vocab });
            }
            out.extend_from_slice(self.val(it).row(id));
        }
        self.push("embedding", Tensor::from_parts(vec![ids.len(), dim], out), Op::Embedding { table: it, ids: ids.to_vec(), dim }, &[it])
    }

    /// Per-row negative log-likelihood of `targets` under softmax of `logits` (`[rows, vocab]`).
    /// Returns a vector of length `rows`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let il = self.idx(logits)?;
        let (rows, vocab) = self.val(il).dims2("cross_entropy")?;
        if targets.len() != rows {
            return Err(mismatch("cross_entropy", format!("{rows} rows but {} targets", targets.len())));
        }
        let data = self.val(il).data();
        let mut nll = Vec::with_capacity(rows);
        let mut probs = vec![0.0; rows * vocab];
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: t, size: vocab });
            }
            let row = &data[r * vocab..(r + 1) * vocab];
            let lse = tensor::log_sum_exp(row);
            nll.push(lse - row[t]);
            for (p, x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        self.push(
            "cross_entropy",
            Tensor::from_parts(vec![rows], nll),
            Op::CrossEntropy { logits: il, targets: targets.to_vec(), probs, vocab },
            &[il],
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        if t.is_empty() {
            return Err(mismatch("mean", "empty input".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::from_parts(vec![], vec![m]), Op::Mean { a: ia }, &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let s = self.val(ia).data().iter().sum::<f64>();
        self.push("sum", Tensor::from_parts(vec![], vec![s]), Op::Sum { a: ia }, &[ia])
    }

    /// Sums each row of a matrix, giving a vector.
    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let (rows, cols) = self.val(ia).dims2("sum_last_axis")?;
        let out = self.val(ia).data().chunks(cols.max(1)).map(|r| r.iter().sum()).collect::<Vec<f64>>();
        debug_assert_eq!(out.len(), rows);
        self.push("sum_last_axis", Tensor::from_parts(vec![rows], out), Op::SumLastAxis { a: ia, cols }, &[ia])
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() || axis > 1 {
            return Err(mismatch("concat", format!("{} parts along axis {axis}", parts.len())));
        }
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>, _>>()?;
        let dims = idx.iter().map(|&i| self.val(i).dims2("concat")).collect::<Result<Vec<_>, _>>()?;
        let (rows, cols) = dims[0];
        let (out, shape, widths) = if axis == 0 {
            if dims.iter().any(|d| d.1 != cols) {
                return Err(mismatch("concat", format!("column counts differ: {dims:?}")));
            }
            let mut out = Vec::new();
            for &i in &idx {
                out.extend_from_slice(self.val(i).data());
            }
            let total = dims.iter().map(|d| d.0).sum();
            (out, vec![total, cols], dims.iter().map(|d| d.0).collect::<Vec<_>>())
        } else {
            if dims.iter().any(|d| d.0 != rows) {
                return Err(mismatch("concat", format!("row counts differ: {dims:?}")));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &i in &idx {
                    out.extend_from_slice(self.val(i).row(r));
                }
            }
            (out, vec![rows, total], dims.iter().map(|d| d.1).collect())
        };
        let op = Op::Concat { inputs: idx.clone(), axis, widths, rows };
        self.push("concat", Tensor::from_parts(shape, out), op, &idx)
    }

    /// Sub-matrix `rows × cols` (half-open ranges).
    pub fn slice(&mut self, a: Var, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let (nr, nc) = self.val(ia).dims2("slice")?;
        if rows.start > rows.end || rows.end > nr || cols.start > cols.end || cols.end > nc {
            return Err(mismatch("slice", format!("{rows:?} x {cols:?} out of [{nr},{nc}]")));
        }
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            out.extend_from_slice(&self.val(ia).row(r)[cols.clone()]);
        }
        let op = Op::Slice { a: ia, r0: rows.start, r1: rows.end, c0: cols.start, c1: cols.end, src_cols: nc };
        self.push("slice", Tensor::from_parts(vec![rows.len(), cols.len()], out), op, &[ia])
    }

    /// Gradients of scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![1.0]);

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b) = (*a, *b);
                let (ad, bd) = (nodes[a].value.data(), nodes[b].value.data());
                if let Some(ga) = slot(nodes, grads, a) {
                    tensor::matmul_grad_a(g, bd, ga, *m, *k, *n);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    tensor::matmul_grad_b(ad, g, gb, *m, *k, *n);
                }
            }
            Op::Transpose { a, rows, cols } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let back = tensor::transpose(g, *cols, *rows);
                    add_into(ga, &back);
                }
            }
            Op::Add { a, b, broadcast } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    if *broadcast {
                        let w = gb.len();
                        for row in g.chunks(w) {
                            add_into(gb, row);
                        }
                    } else {
                        add_into(gb, g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (d, x) in gb.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let (ad, bd) = (nodes[a].value.data(), nodes[b].value.data());
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((d, x), y) in ga.iter_mut().zip(g).zip(bd) {
                        *d += x * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    for ((d, x), y) in gb.iter_mut().zip(g).zip(ad) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (d, x) in ga.iter_mut().zip(g) {
                        *d += x * c;
                    }
                }
            }
            Op::AddScalar { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Exp { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, x), y) in ga.iter_mut().zip(g).zip(out) {
                        *d += x * y;
                    }
                }
            }
            Op::Log { a } => {
                let input = nodes[*a].value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, x), y) in ga.iter_mut().zip(g).zip(input) {
                        *d += x / y;
                    }
                }
            }
            Op::Gelu { a } => {
                let input = nodes[*a].value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, x), y) in ga.iter_mut().zip(g).zip(input) {
                        *d += x * tensor::gelu_grad(*y);
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                let input = nodes[*a].value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, x), y) in ga.iter_mut().zip(g).zip(input) {
                        if *y >= *lo && *y <= *hi {
                            *d += x;
                        }
                    }
                }
            }
            Op::Softmax { a, rows, cols } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for r in 0..*rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let dy = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(dy).map(|(p, q)| p * q).sum();
                        for c in 0..*cols {
                            ga[r * cols + c] += y[c] * (dy[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, cols, xhat, rstd } => {
                let cols = *cols;
                let gd = nodes[*gain].value.data().to_vec();
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (r, row) in g.chunks(cols).enumerate() {
                        for c in 0..cols {
                            gg[c] += row[c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; cols];
                    for (r, row) in g.chunks(cols).enumerate() {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = row[c] * gd[c];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] += rstd[r] * (dxhat[c] - m1 - xh[c] * m2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids, dim } => {
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (t, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * dim..(id + 1) * dim], &g[t * dim..(t + 1) * dim]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, vocab } => {
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let dst = &mut gl[r * vocab..(r + 1) * vocab];
                        for (d, q) in dst.iter_mut().zip(p) {
                            *d += g[r] * q;
                        }
                        dst[t] -= g[r];
                    }
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    for d in ga.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SumLastAxis { a, cols } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (r, row) in ga.chunks_mut(*cols).enumerate() {
                        for d in row.iter_mut() {
                            *d += g[r];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&j, &w) in inputs.iter().zip(widths) {
                    if let Some(gj) = slot(nodes, grads, j) {
                        if *axis == 0 {
                            let cols = g.len() / total.max(1);
                            add_into(gj, &g[offset * cols..(offset + w) * cols]);
                        } else {
                            for r in 0..*rows {
                                add_into(&mut gj[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { a, r0, r1, c0, c1, src_cols } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let w = c1 - c0;
                    for (k, r) in (*r0..*r1).enumerate() {
                        add_into(&mut ga[r * src_cols + c0..r * src_cols + c1], &g[k * w..(k + 1) * w]);
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], j: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[j].needs_grad {
        return None;
    }
    Some(grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, shaped like `v`'s value. Nodes the loss
    /// does not depend on get zeros.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Result<Tensor, TensorError> {
        if v.tape != self.tape || v.tape != tape.id {
            return Err(TensorError::ForeignVar);
        }
        let shape = tape.nodes[v.index].value.shape().to_vec();
        Ok(match self.grads.get(v.index).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).unwrap());
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(&tape, x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(4.0).unwrap());
        let loss = tape.scale(c, 2.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, false).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn uniform_cross_entropy_is_ln_vocab() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[0.0; 4]));
        for target in 0..4 {
            let y = tape.cross_entropy(x, &[target]).unwrap();
            assert!((tape.value(y).data()[0] - 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0).unwrap());
        assert_eq!(tape.backward(y).unwrap_err(), TensorError::ForeignVar);
    }

    #[test]
    fn non_finite_output_names_the_operation() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]));
        assert_eq!(tape.log(x).unwrap_err(), TensorError::NonFinite { op: "log" });
        let big = tape.leaf(t(&[1], &[1000.0]));
        assert_eq!(tape.exp(big).unwrap_err(), TensorError::NonFinite { op: "exp" });
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(t(&[2, 3], &[0.0; 6]));
        assert!(tape.matmul(a, b).is_err());
        let v = tape.leaf(t(&[2], &[0.0; 2]));
        assert!(tape.add(a, v).is_err());
        assert!(tape.slice(a, 0..3, 0..1).is_err());
        let table = tape.leaf(t(&[3, 2], &[0.0; 6]));
        assert!(tape.embedding(table, &[3]).is_err());
    }

    #[test]
    fn linearity_of_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.3, -1.2, 0.7, 2.0]));
        let l1 = {
            let e = tape.exp(x).unwrap();
            tape.sum(e).unwrap()
        };
        let l2 = {
            let s = tape.softmax(x, false).unwrap();
            let m = tape.mul(s, x).unwrap();
            tape.mean(m).unwrap()
        };
        let both = tape.add(l1, l2).unwrap();
        let g1 = tape.backward(l1).unwrap().wrt(&tape, x).unwrap();
        let g2 = tape.backward(l2).unwrap().wrt(&tape, x).unwrap();
        let g12 = tape.backward(both).unwrap().wrt(&tape, x).unwrap();
        for ((a, b), c) in g1.data().iter().zip(g2.data()).zip(g12.data()) {
            assert!((a + b - c).abs() <= 1e-15 * (1.0 + c.abs()));
        }
    }
}
