//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Every forward op appends one node holding its output value and enough
//! bookkeeping to run its vector-Jacobian product. `backward` walks the nodes
//! in reverse recording order and adds parameter gradients into a
//! [`ParamStore`]. A tape supports exactly one backward pass.

use rand::Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{GbreError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Name and component scope of one recorded op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub op: &'static str,
    pub scope: &'static str,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Gather {
        param: ParamId,
        rows: Vec<usize>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SliceCols {
        x: Var,
        lo: usize,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Relu(Var),
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
        segments: usize,
    },
    Unfold {
        x: Var,
        window: usize,
    },
    CosineRows(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    Element {
        x: Var,
        row: usize,
        col: usize,
    },
    Sum(Var),
    MeanRows(Var),
    TileRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Gather { .. } => "gather",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Reshape(_) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::Relu(_) => "relu",
            Op::SegmentMax { .. } => "segment_max",
            Op::Unfold { .. } => "unfold",
            Op::CosineRows(_) => "cosine_rows",
            Op::Dropout { .. } => "dropout",
            Op::SelectRow { .. } => "select_row",
            Op::Element { .. } => "element",
            Op::Sum(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::TileRows(_) => "tile_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    scope: &'static str,
}

/// Records forward computations for a single backward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    scope: &'static str,
    consumed: bool,
    branches: Vec<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn fnv1a(values: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scope: "",
            consumed: false,
            branches: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Runs `f` with every recorded op tagged by `scope`.
    pub fn scoped<T>(&mut self, scope: &'static str, f: impl FnOnce(&mut Tape) -> T) -> T {
        let prev = std::mem::replace(&mut self.scope, scope);
        let out = f(self);
        self.scope = prev;
        out
    }

    /// Op names and scopes in recording order.
    pub fn trace(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .map(|n| OpRecord {
                op: n.op.name(),
                scope: n.scope,
            })
            .collect()
    }

    /// Fingerprints of every data-dependent branch taken so far (ReLU sign
    /// patterns, max-pooling winners, explicit selections). Two evaluations
    /// with equal signatures lie on the same smooth piece of the loss.
    pub fn branch_signature(&self) -> &[u64] {
        &self.branches
    }

    /// Records an externally made discrete choice in the branch signature.
    pub fn note_branch(&mut self, choice: u64) {
        self.branches.push(choice);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).tensor.clone();
        self.push(value, Op::Param(id))
    }

    /// Embedding lookup: copies `rows` of a parameter table.
    pub fn gather(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = &store.get(id).tensor;
        let (n, d) = table.dims();
        if rows.is_empty() {
            return Err(GbreError::invalid("gather", "no rows requested"));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(GbreError::invalid(
                    "gather",
                    format!("row {r} out of range for table with {n} rows"),
                ));
            }
            data.extend_from_slice(table.row_slice(r));
        }
        let value = Tensor::matrix(rows.len(), d, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                param: id,
                rows: rows.to_vec(),
            },
        ))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(GbreError::shape("matmul", &[m, k], &[k2, n]));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = transposed(self.value(a));
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (r, n2) = self.dims(row);
        if r != 1 || n != n2 {
            return Err(GbreError::shape("add_row", &[m, n], &[r, n2]));
        }
        let rv = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..m {
            for (x, y) in value.row_slice_mut(i).iter_mut().zip(&rv) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `a * row` elementwise, broadcasting a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (r, n2) = self.dims(row);
        if r != 1 || n != n2 {
            return Err(GbreError::shape("mul_row", &[m, n], &[r, n2]));
        }
        let rv = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..m {
            for (x, y) in value.row_slice_mut(i).iter_mut().zip(&rv) {
                *x *= y;
            }
        }
        Ok(self.push(value, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x *= factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Concatenates along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| GbreError::invalid("concat_cols", "nothing to concatenate"))?;
        let rows = self.dims(first).0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(GbreError::shape(
                    "concat_cols",
                    &[rows, self.dims(first).1],
                    &[r, c],
                ));
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| GbreError::invalid("concat_rows", "nothing to concatenate"))?;
        let cols = self.dims(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(GbreError::shape(
                    "concat_rows",
                    &[self.dims(first).0, cols],
                    &[r, c],
                ));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let src = self.value(a);
        if src.len() != rows * cols {
            return Err(GbreError::shape("reshape", src.shape(), &[rows, cols]));
        }
        let value = Tensor::matrix(rows, cols, src.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Columns `lo..hi` of every row.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if lo >= hi || hi > cols {
            return Err(GbreError::invalid(
                "slice_cols",
                format!("columns [{lo}, {hi}) invalid for {cols} columns"),
            ));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * (hi - lo));
        for i in 0..rows {
            data.extend_from_slice(&src.row_slice(i)[lo..hi]);
        }
        let value = Tensor::matrix(rows, hi - lo, data)?;
        Ok(self.push(value, Op::SliceCols { x: a, lo }))
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if !src.is_finite() {
            return Err(GbreError::NonFinite("softmax_rows input".into()));
        }
        let mut value = src.clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_slice_mut(i));
        }
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if !src.is_finite() {
            return Err(GbreError::NonFinite("log_softmax_rows input".into()));
        }
        let mut value = src.clone();
        for i in 0..value.rows() {
            let row = value.row_slice_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.push(value, Op::LogSoftmaxRows(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&x| x.max(0.0)).collect(),
        )
        .expect("same shape");
        let pattern = fnv1a(src.data().iter().map(|&x| u64::from(x > 0.0)));
        self.branches.push(pattern);
        self.push(value, Op::Relu(a))
    }

    /// Row-wise maximum over column ranges: output `(r, s)` is the maximum
    /// of row `r` over `segments[s]`. Ranges are half-open and must be
    /// nonempty. Ties resolve to the lowest column.
    pub fn segment_max(&mut self, a: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if segments.is_empty() {
            return Err(GbreError::invalid("segment_max", "no segments"));
        }
        for &(lo, hi) in segments {
            if lo >= hi || hi > cols {
                return Err(GbreError::invalid(
                    "segment_max",
                    format!("segment [{lo}, {hi}) invalid for {cols} columns"),
                ));
            }
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * segments.len());
        let mut argmax = Vec::with_capacity(rows * segments.len());
        for i in 0..rows {
            let row = src.row_slice(i);
            for &(lo, hi) in segments {
                let mut best = lo;
                for j in lo + 1..hi {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::matrix(rows, segments.len(), out)?;
        self.branches.push(fnv1a(argmax.iter().map(|&j| j as u64)));
        Ok(self.push(
            value,
            Op::SegmentMax {
                x: a,
                argmax,
                segments: segments.len(),
            },
        ))
    }

    /// Sliding-window unfold with zero padding at both ends: row `i` of the
    /// output is the concatenation of input rows `i - h ..= i + h` where
    /// `h = (window - 1) / 2`. The window must be odd.
    pub fn unfold(&mut self, a: Var, window: usize) -> Result<Var> {
        if window == 0 || window.is_multiple_of(2) {
            return Err(GbreError::invalid(
                "unfold",
                format!("window {window} must be odd"),
            ));
        }
        let (rows, cols) = self.dims(a);
        let half = (window - 1) / 2;
        let src = self.value(a);
        let mut data = vec![0.0; rows * window * cols];
        for i in 0..rows {
            for o in 0..window {
                let j = i + o;
                if j < half || j - half >= rows {
                    continue;
                }
                let dst = (i * window + o) * cols;
                data[dst..dst + cols].copy_from_slice(src.row_slice(j - half));
            }
        }
        let value = Tensor::matrix(rows, window * cols, data)?;
        Ok(self.push(value, Op::Unfold { x: a, window }))
    }

    /// Pairwise cosine similarity between rows (`N x D -> N x N`). The
    /// diagonal is exactly 1 for nonzero rows; any pair involving a zero
    /// row scores 0.
    pub fn cosine_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let (n, _) = src.dims();
        let norms: Vec<f64> = (0..n).map(|i| norm(src.row_slice(i))).collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if norms[i] == 0.0 || norms[j] == 0.0 {
                    continue;
                }
                out[i * n + j] = if i == j {
                    1.0
                } else {
                    dot(src.row_slice(i), src.row_slice(j)) / (norms[i] * norms[j])
                };
            }
        }
        let value = Tensor::matrix(n, n, out)?;
        Ok(self.push(value, Op::CosineRows(a)))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(GbreError::invalid(
                "dropout",
                format!("rate {rate} outside [0, 1]"),
            ));
        }
        let keep = 1.0 - rate;
        let src = self.value(a);
        let mask: Vec<f64> = (0..src.len())
            .map(|_| {
                if keep > 0.0 && rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )?;
        Ok(self.push(value, Op::Dropout { x: a, mask }))
    }

    // ── selection and reduction ─────────────────────────────────────────

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (r, _) = self.dims(a);
        if row >= r {
            return Err(GbreError::invalid(
                "select_row",
                format!("row {row} of {r}"),
            ));
        }
        let value = Tensor::row(self.value(a).row_slice(row).to_vec());
        Ok(self.push(value, Op::SelectRow { x: a, row }))
    }

    pub fn element(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if row >= r || col >= c {
            return Err(GbreError::invalid(
                "element",
                format!("({row}, {col}) of {r}x{c}"),
            ));
        }
        let value = Tensor::scalar(self.value(a).get(row, col));
        Ok(self.push(value, Op::Element { x: a, row, col }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (r, c) = src.dims();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(src.row_slice(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(Tensor::row(out), Op::MeanRows(a))
    }

    /// Repeats a `1 x n` row `times` times.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != 1 || times == 0 {
            return Err(GbreError::shape("tile_rows", &[r, c], &[times, c]));
        }
        let row = self.value(a).data().to_vec();
        let value = Tensor::matrix(times, c, row.repeat(times))?;
        Ok(self.push(value, Op::TileRows(a)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.dims(a), self.dims(b));
        if sa != sb {
            return Err(GbreError::shape(op, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        Ok(())
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates `d(loss)/d(param)` into every reachable parameter.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_scaled(loss, store, 1.0)
    }

    /// As [`Tape::backward`], with every contribution multiplied by `scale`.
    pub fn backward_scaled(&mut self, loss: Var, store: &mut ParamStore, scale: f64) -> Result<()> {
        if self.consumed {
            return Err(GbreError::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GbreError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        if !lv.is_finite() {
            return Err(GbreError::NonFinite("loss".into()));
        }
        let seed = Tensor::filled(lv.shape(), 1.0);
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.accumulate(*id, &g, scale),
                Op::Gather { param, rows } => store.accumulate_rows(*param, rows, &g, scale),
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (m, k) = av.dims();
                    let n = bv.cols();
                    let (gd, ad, bd) = (g.data(), av.data(), bv.data());
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] = dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = ad[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(m, k, da)?);
                    accumulate(&mut grads, *b, Tensor::matrix(k, n, db)?);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, transposed(&g)),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let (m, n) = g.dims();
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        for (o, x) in dr.iter_mut().zip(g.row_slice(i)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, Tensor::row(dr));
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da = zip_map(&g, bv, |x, y| x * y);
                    let db = zip_map(&g, av, |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MulRow(a, row) => {
                    let av = &self.nodes[a.0].value;
                    let rv = self.nodes[row.0].value.data();
                    let (m, n) = g.dims();
                    let mut da = g.clone();
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        let arow = av.row_slice(i);
                        for (j, x) in da.row_slice_mut(i).iter_mut().enumerate() {
                            dr[j] += *x * arow[j];
                            *x *= rv[j];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *row, Tensor::row(dr));
                }
                Op::Scale(a, f) => {
                    let mut da = g;
                    da.data_mut().iter_mut().for_each(|x| *x *= f);
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.nodes[p.0].value.cols();
                        let mut part = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            part.extend_from_slice(&g.row_slice(i)[offset..offset + c]);
                        }
                        offset += c;
                        accumulate(&mut grads, *p, Tensor::matrix(rows, c, part)?);
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let r = self.nodes[p.0].value.rows();
                        let part = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        offset += r;
                        accumulate(&mut grads, *p, Tensor::matrix(r, cols, part)?);
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::new(shape, g.into_data())?);
                }
                Op::SliceCols { x, lo } => {
                    let (rows, cols) = self.nodes[x.0].value.dims();
                    let width = g.cols();
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        dx[i * cols + lo..i * cols + lo + width].copy_from_slice(g.row_slice(i));
                    }
                    accumulate(&mut grads, *x, Tensor::matrix(rows, cols, dx)?);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = g;
                    for i in 0..y.rows() {
                        let yr = y.row_slice(i);
                        let gr = da.row_slice_mut(i);
                        let s = dot(gr, yr);
                        for (x, yv) in gr.iter_mut().zip(yr) {
                            *x = yv * (*x - s);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = g;
                    for i in 0..y.rows() {
                        let yr = y.row_slice(i);
                        let gr = da.row_slice_mut(i);
                        let s: f64 = gr.iter().sum();
                        for (x, yv) in gr.iter_mut().zip(yr) {
                            *x -= yv.exp() * s;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::SegmentMax {
                    x,
                    argmax,
                    segments,
                } => {
                    let src = &self.nodes[x.0].value;
                    let (rows, cols) = src.dims();
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for s in 0..*segments {
                            dx[i * cols + argmax[i * segments + s]] += g.get(i, s);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::matrix(rows, cols, dx)?);
                }
                Op::Unfold { x, window } => {
                    let (rows, cols) = self.nodes[x.0].value.dims();
                    let half = (window - 1) / 2;
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let grow = g.row_slice(i);
                        for o in 0..*window {
                            let j = i + o;
                            if j < half || j - half >= rows {
                                continue;
                            }
                            let src = &grow[o * cols..(o + 1) * cols];
                            let dst = &mut dx[(j - half) * cols..(j - half + 1) * cols];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::matrix(rows, cols, dx)?);
                }
                Op::CosineRows(a) => {
                    let src = &self.nodes[a.0].value;
                    let (n, d) = src.dims();
                    let norms: Vec<f64> = (0..n).map(|i| norm(src.row_slice(i))).collect();
                    let unit: Vec<Vec<f64>> = (0..n)
                        .map(|i| {
                            let r = src.row_slice(i);
                            if norms[i] == 0.0 {
                                vec![0.0; d]
                            } else {
                                r.iter().map(|x| x / norms[i]).collect()
                            }
                        })
                        .collect();
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        if norms[i] == 0.0 {
                            continue;
                        }
                        // d(loss)/d(unit_i), then project out the radial part.
                        let mut du = vec![0.0; d];
                        for j in 0..n {
                            if i == j || norms[j] == 0.0 {
                                continue;
                            }
                            let w = g.get(i, j) + g.get(j, i);
                            for (o, u) in du.iter_mut().zip(&unit[j]) {
                                *o += w * u;
                            }
                        }
                        let radial = dot(&du, &unit[i]);
                        for k in 0..d {
                            dx[i * d + k] = (du[k] - radial * unit[i][k]) / norms[i];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(n, d, dx)?);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g;
                    dx.data_mut()
                        .iter_mut()
                        .zip(mask)
                        .for_each(|(v, m)| *v *= m);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SelectRow { x, row } => {
                    let mut dx = Tensor::zeros(self.nodes[x.0].value.shape());
                    dx.row_slice_mut(*row).copy_from_slice(g.data());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Element { x, row, col } => {
                    let src = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(src.shape());
                    let c = src.cols();
                    dx.data_mut()[row * c + col] = g.data()[0];
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::filled(&shape, g.data()[0]));
                }
                Op::MeanRows(a) => {
                    let (r, _) = self.nodes[a.0].value.dims();
                    let row: Vec<f64> = g.data().iter().map(|x| x / r as f64).collect();
                    let c = row.len();
                    accumulate(&mut grads, *a, Tensor::matrix(r, c, row.repeat(r))?);
                }
                Op::TileRows(a) => {
                    let (m, n) = g.dims();
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        for (o, x) in dr.iter_mut().zip(g.row_slice(i)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::row(dr));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn transposed(t: &Tensor) -> Tensor {
    let (r, c) = t.dims();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::matrix(c, r, out).expect("nonzero dims")
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
