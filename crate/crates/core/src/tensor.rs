//! Flat-matrix reverse-mode automatic differentiation.
//!
//! Everything is a dense row-major `f64` matrix recorded on a [`Tape`].
//! The op set is deliberately small: exactly what a recurrent graph network
//! with per-pair feature construction needs. No broadcasting beyond bias
//! addition over rows; every shape error names both operands.
//!
//! Forward evaluation is sequential and allocation-deterministic: identical
//! inputs yield bit-identical outputs.

use crate::error::{Error, Result};

/// Index of a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddRowBias(TensorId, TensorId),
    ScaleRows(TensorId, TensorId),
    RowSums(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Relu(TensorId),
    Sqrt(TensorId),
    SoftmaxRows(TensorId),
    ConcatRows(TensorId, TensorId),
    ConcatCols(TensorId, TensorId),
    SliceRows(TensorId, usize),
    SliceCols(TensorId, usize),
    RepeatRowsEach(TensorId, usize),
    TileRows(TensorId, usize),
    GatherRows(TensorId, Vec<usize>),
    /// Per-row axis-aligned bounds over 18 stacked 3D points; the chosen
    /// source index per output entry is frozen at forward time.
    JointAabb(TensorId, Vec<usize>),
    SumAll(TensorId),
    Scale(TensorId, f64),
    Reshape(TensorId),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Records a forward computation and replays adjoints in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Gradient buffer; all zeros until [`Tape::backward`] runs.
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(rows * cols, value.len());
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { rows, cols, value, grad, needs_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn check_len(op: &'static str, rows: usize, cols: usize, len: usize) -> Result<()> {
        if rows * cols != len {
            return Err(Error::InvalidDimension {
                op,
                msg: format!("{rows}x{cols} does not hold {len} values"),
            });
        }
        Ok(())
    }

    /// Trainable input; receives a gradient after backward.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<TensorId> {
        Self::check_len("leaf", rows, cols, data.len())?;
        Ok(self.push(rows, cols, data, true, Op::Leaf))
    }

    /// Non-trainable input; never accumulates a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<TensorId> {
        Self::check_len("constant", rows, cols, data.len())?;
        Ok(self.push(rows, cols, data, false, Op::Constant))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(1, 1, vec![v], false, Op::Constant)
    }

    // ── Arithmetic ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: (m, k), rhs: (k2, n) });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, g, Op::MatMul(a, b)))
    }

    fn binary_checked(&mut self, op: &'static str, a: TensorId, b: TensorId) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.binary_checked("add", a, b)?;
        let v: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, v, g, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.binary_checked("sub", a, b)?;
        let v: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, v, g, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.binary_checked("mul", a, b)?;
        let v: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, v, g, Op::Mul(a, b)))
    }

    /// Adds a `1×n` bias row to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != n {
            return Err(Error::ShapeMismatch { op: "add_row_bias", lhs: (m, n), rhs: (br, bc) });
        }
        let bv = self.value(bias).to_vec();
        let mut v = self.value(a).to_vec();
        for row in v.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(&bv) {
                *x += b;
            }
        }
        let g = self.needs(a) || self.needs(bias);
        Ok(self.push(m, n, v, g, Op::AddRowBias(a, bias)))
    }

    /// Multiplies row `i` of an `m×n` matrix by entry `i` of an `m×1` column.
    pub fn scale_rows(&mut self, a: TensorId, scales: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let (sr, sc) = self.shape(scales);
        if sr != m || sc != 1 {
            return Err(Error::ShapeMismatch { op: "scale_rows", lhs: (m, n), rhs: (sr, sc) });
        }
        let sv = self.value(scales).to_vec();
        let mut v = self.value(a).to_vec();
        for (i, row) in v.chunks_mut(n).enumerate() {
            for x in row.iter_mut() {
                *x *= sv[i];
            }
        }
        let g = self.needs(a) || self.needs(scales);
        Ok(self.push(m, n, v, g, Op::ScaleRows(a, scales)))
    }

    /// Sum of each row: `m×n → m×1`.
    pub fn row_sums(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let v: Vec<f64> = self.value(a).chunks(n).map(|row| row.iter().sum()).collect();
        let g = self.needs(a);
        Ok(self.push(m, 1, v, g, Op::RowSums(a)))
    }

    // ── Nonlinearities ──────────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let g = self.needs(a);
        self.push(r, c, v, g, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|&x| x.tanh()).collect();
        let g = self.needs(a);
        self.push(r, c, v, g, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let g = self.needs(a);
        self.push(r, c, v, g, Op::Relu(a))
    }

    /// Elementwise square root. The adjoint at exactly zero is defined as
    /// zero so that a perfectly fit residual norm does not poison gradients.
    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if self.value(a).iter().any(|&x| x < 0.0) {
            return Err(Error::Numeric { op: "sqrt", msg: "negative input".into() });
        }
        let v: Vec<f64> = self.value(a).iter().map(|&x| x.sqrt()).collect();
        let g = self.needs(a);
        Ok(self.push(r, c, v, g, Op::Sqrt(a)))
    }

    /// Row-wise softmax with max-subtraction; each output row sums to 1.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if self.value(a).iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric { op: "softmax_rows", msg: "non-finite logit".into() });
        }
        let mut v = self.value(a).to_vec();
        for row in v.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let g = self.needs(a);
        Ok(self.push(m, n, v, g, Op::SoftmaxRows(a)))
    }

    // ── Layout ──────────────────────────────────────────────────────────────

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ma, na) = self.shape(a);
        let (mb, nb) = self.shape(b);
        if na != nb {
            return Err(Error::ShapeMismatch { op: "concat_rows", lhs: (ma, na), rhs: (mb, nb) });
        }
        let mut v = self.value(a).to_vec();
        v.extend_from_slice(self.value(b));
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(ma + mb, na, v, g, Op::ConcatRows(a, b)))
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ma, na) = self.shape(a);
        let (mb, nb) = self.shape(b);
        if ma != mb {
            return Err(Error::ShapeMismatch { op: "concat_cols", lhs: (ma, na), rhs: (mb, nb) });
        }
        let mut v = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            v.extend_from_slice(&self.value(a)[i * na..(i + 1) * na]);
            v.extend_from_slice(&self.value(b)[i * nb..(i + 1) * nb]);
        }
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(ma, na + nb, v, g, Op::ConcatCols(a, b)))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if start + len > m {
            return Err(Error::InvalidDimension {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of 0..{m}", start + len),
            });
        }
        let v = self.value(a)[start * n..(start + len) * n].to_vec();
        let g = self.needs(a);
        Ok(self.push(len, n, v, g, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(Error::InvalidDimension {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of 0..{n}", start + len),
            });
        }
        let mut v = Vec::with_capacity(m * len);
        for i in 0..m {
            v.extend_from_slice(&self.value(a)[i * n + start..i * n + start + len]);
        }
        let g = self.needs(a);
        Ok(self.push(m, len, v, g, Op::SliceCols(a, start)))
    }

    /// Repeats each row `k` times consecutively: row `i` lands at `i·k..(i+1)·k`.
    pub fn repeat_rows_each(&mut self, a: TensorId, k: usize) -> Result<TensorId> {
        if k == 0 {
            return Err(Error::InvalidDimension { op: "repeat_rows_each", msg: "k = 0".into() });
        }
        let (m, n) = self.shape(a);
        let mut v = Vec::with_capacity(m * k * n);
        for i in 0..m {
            for _ in 0..k {
                v.extend_from_slice(&self.value(a)[i * n..(i + 1) * n]);
            }
        }
        let g = self.needs(a);
        Ok(self.push(m * k, n, v, g, Op::RepeatRowsEach(a, k)))
    }

    /// Stacks `k` copies of the whole matrix: row `i` lands at `t·m + i`.
    pub fn tile_rows(&mut self, a: TensorId, k: usize) -> Result<TensorId> {
        if k == 0 {
            return Err(Error::InvalidDimension { op: "tile_rows", msg: "k = 0".into() });
        }
        let (m, n) = self.shape(a);
        let mut v = Vec::with_capacity(m * k * n);
        for _ in 0..k {
            v.extend_from_slice(self.value(a));
        }
        let g = self.needs(a);
        Ok(self.push(m * k, n, v, g, Op::TileRows(a, k)))
    }

    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidDimension {
                op: "gather_rows",
                msg: format!("row index {bad} out of 0..{m}"),
            });
        }
        let mut v = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            v.extend_from_slice(&self.value(a)[i * n..(i + 1) * n]);
        }
        let g = self.needs(a);
        Ok(self.push(indices.len(), n, v, g, Op::GatherRows(a, indices.to_vec())))
    }

    /// Per-row axis-aligned bounds of 18 stacked 3D points:
    /// `m×54 → m×6` laid out `[min_x, min_y, min_z, max_x, max_y, max_z]`.
    /// Gradients flow to the first extremal point per axis.
    pub fn joint_aabb(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if n != 54 {
            return Err(Error::InvalidDimension {
                op: "joint_aabb",
                msg: format!("expected 54 columns (18 joints x 3), got {n}"),
            });
        }
        let av = self.value(a);
        let mut v = vec![0.0; m * 6];
        let mut srcs = vec![0usize; m * 6];
        for r in 0..m {
            for axis in 0..3 {
                let (mut mn, mut mni) = (f64::INFINITY, 0usize);
                let (mut mx, mut mxi) = (f64::NEG_INFINITY, 0usize);
                for j in 0..18 {
                    let idx = r * 54 + 3 * j + axis;
                    let x = av[idx];
                    if x < mn {
                        mn = x;
                        mni = idx;
                    }
                    if x > mx {
                        mx = x;
                        mxi = idx;
                    }
                }
                v[r * 6 + axis] = mn;
                v[r * 6 + 3 + axis] = mx;
                srcs[r * 6 + axis] = mni;
                srcs[r * 6 + 3 + axis] = mxi;
            }
        }
        let g = self.needs(a);
        Ok(self.push(m, 6, v, g, Op::JointAabb(a, srcs)))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).iter().sum();
        let g = self.needs(a);
        self.push(1, 1, vec![s], g, Op::SumAll(a))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let (r, cl) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|&x| x * c).collect();
        let g = self.needs(a);
        self.push(r, cl, v, g, Op::Scale(a, c))
    }

    pub fn reshape(&mut self, a: TensorId, rows: usize, cols: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if rows * cols != m * n {
            return Err(Error::InvalidDimension {
                op: "reshape",
                msg: format!("{m}x{n} cannot become {rows}x{cols}"),
            });
        }
        let v = self.value(a).to_vec();
        let g = self.needs(a);
        Ok(self.push(rows, cols, v, g, Op::Reshape(a)))
    }

    // ── Backward ────────────────────────────────────────────────────────────

    /// Populates gradients of every participating leaf with respect to a
    /// scalar loss. Existing gradients are cleared first, so repeated calls
    /// recompute rather than accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::InvalidDimension {
                op: "backward",
                msg: format!("loss must be 1x1, got {r}x{c}"),
            });
        }
        for n in &mut self.nodes {
            for g in &mut n.grad {
                *g = 0.0;
            }
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(a);
                    let n = self.nodes[i].cols;
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        {
                            let g = &self.nodes[i].grad;
                            let bv = &self.nodes[b.0].value;
                            // da = g · bᵀ
                            for ii in 0..m {
                                for kk in 0..k {
                                    let mut acc = 0.0;
                                    let grow = &g[ii * n..(ii + 1) * n];
                                    let brow = &bv[kk * n..(kk + 1) * n];
                                    for j in 0..n {
                                        acc += grow[j] * brow[j];
                                    }
                                    da[ii * k + kk] = acc;
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; k * n];
                        {
                            let g = &self.nodes[i].grad;
                            let av = &self.nodes[a.0].value;
                            // db = aᵀ · g
                            for ii in 0..m {
                                let grow = &g[ii * n..(ii + 1) * n];
                                for kk in 0..k {
                                    let aik = av[ii * k + kk];
                                    if aik == 0.0 {
                                        continue;
                                    }
                                    let drow = &mut db[kk * n..(kk + 1) * n];
                                    for j in 0..n {
                                        drow[j] += aik * grow[j];
                                    }
                                }
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    let g = self.nodes[i].grad.clone();
                    if self.needs(a) {
                        self.accumulate(a, &g);
                    }
                    if self.needs(b) {
                        self.accumulate(b, &g);
                    }
                }
                Op::Sub(a, b) => {
                    let g = self.nodes[i].grad.clone();
                    if self.needs(a) {
                        self.accumulate(a, &g);
                    }
                    if self.needs(b) {
                        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                        self.accumulate(b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let da: Vec<f64> = self.nodes[i]
                            .grad
                            .iter()
                            .zip(&self.nodes[b.0].value)
                            .map(|(g, y)| g * y)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> = self.nodes[i]
                            .grad
                            .iter()
                            .zip(&self.nodes[a.0].value)
                            .map(|(g, x)| g * x)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::AddRowBias(a, bias) => {
                    let (m, n) = self.shape(a);
                    if self.needs(a) {
                        let g = self.nodes[i].grad.clone();
                        self.accumulate(a, &g);
                    }
                    if self.needs(bias) {
                        let mut db = vec![0.0; n];
                        for ii in 0..m {
                            let grow = &self.nodes[i].grad[ii * n..(ii + 1) * n];
                            for j in 0..n {
                                db[j] += grow[j];
                            }
                        }
                        self.accumulate(bias, &db);
                    }
                }
                Op::ScaleRows(a, scales) => {
                    let (m, n) = self.shape(a);
                    if self.needs(a) {
                        let sv = &self.nodes[scales.0].value;
                        let mut da = vec![0.0; m * n];
                        for ii in 0..m {
                            let grow = &self.nodes[i].grad[ii * n..(ii + 1) * n];
                            for j in 0..n {
                                da[ii * n + j] = grow[j] * sv[ii];
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.needs(scales) {
                        let av = &self.nodes[a.0].value;
                        let mut ds = vec![0.0; m];
                        for ii in 0..m {
                            let grow = &self.nodes[i].grad[ii * n..(ii + 1) * n];
                            let arow = &av[ii * n..(ii + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * arow[j];
                            }
                            ds[ii] = acc;
                        }
                        self.accumulate(scales, &ds);
                    }
                }
                Op::RowSums(a) => {
                    let (m, n) = self.shape(a);
                    let mut da = vec![0.0; m * n];
                    for ii in 0..m {
                        let g = self.nodes[i].grad[ii];
                        for j in 0..n {
                            da[ii * n + j] = g;
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = self.nodes[i]
                        .grad
                        .iter()
                        .zip(&self.nodes[i].value)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> = self.nodes[i]
                        .grad
                        .iter()
                        .zip(&self.nodes[i].value)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = self.nodes[i]
                        .grad
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Sqrt(a) => {
                    let da: Vec<f64> = self.nodes[i]
                        .grad
                        .iter()
                        .zip(&self.nodes[i].value)
                        .map(|(g, y)| if *y == 0.0 { 0.0 } else { g * 0.5 / y })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = self.shape(a);
                    let mut da = vec![0.0; m * n];
                    for ii in 0..m {
                        let y = &self.nodes[i].value[ii * n..(ii + 1) * n];
                        let g = &self.nodes[i].grad[ii * n..(ii + 1) * n];
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[j] * y[j];
                        }
                        for j in 0..n {
                            da[ii * n + j] = y[j] * (g[j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::ConcatRows(a, b) => {
                    let (ma, n) = self.shape(a);
                    if self.needs(a) {
                        let da = self.nodes[i].grad[..ma * n].to_vec();
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let db = self.nodes[i].grad[ma * n..].to_vec();
                        self.accumulate(b, &db);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (m, na) = self.shape(a);
                    let nb = self.nodes[b.0].cols;
                    let n = na + nb;
                    if self.needs(a) {
                        let mut da = vec![0.0; m * na];
                        for ii in 0..m {
                            da[ii * na..(ii + 1) * na]
                                .copy_from_slice(&self.nodes[i].grad[ii * n..ii * n + na]);
                        }
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; m * nb];
                        for ii in 0..m {
                            db[ii * nb..(ii + 1) * nb]
                                .copy_from_slice(&self.nodes[i].grad[ii * n + na..(ii + 1) * n]);
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::SliceRows(a, start) => {
                    let (_, n) = self.shape(a);
                    let len = self.nodes[i].rows;
                    let g = self.nodes[i].grad.clone();
                    let node = &mut self.nodes[a.0];
                    for (x, gg) in node.grad[start * n..(start + len) * n].iter_mut().zip(&g) {
                        *x += gg;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = self.shape(a);
                    let len = self.nodes[i].cols;
                    let g = self.nodes[i].grad.clone();
                    let node = &mut self.nodes[a.0];
                    for ii in 0..m {
                        for j in 0..len {
                            node.grad[ii * n + start + j] += g[ii * len + j];
                        }
                    }
                }
                Op::RepeatRowsEach(a, k) => {
                    let (m, n) = self.shape(a);
                    let mut da = vec![0.0; m * n];
                    for ii in 0..m {
                        for t in 0..k {
                            let grow = &self.nodes[i].grad[(ii * k + t) * n..(ii * k + t + 1) * n];
                            for j in 0..n {
                                da[ii * n + j] += grow[j];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::TileRows(a, k) => {
                    let (m, n) = self.shape(a);
                    let mut da = vec![0.0; m * n];
                    for t in 0..k {
                        for ii in 0..m {
                            let grow = &self.nodes[i].grad[(t * m + ii) * n..(t * m + ii + 1) * n];
                            for j in 0..n {
                                da[ii * n + j] += grow[j];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::GatherRows(a, indices) => {
                    let (m, n) = self.shape(a);
                    let mut da = vec![0.0; m * n];
                    for (r, &src) in indices.iter().enumerate() {
                        let grow = &self.nodes[i].grad[r * n..(r + 1) * n];
                        for j in 0..n {
                            da[src * n + j] += grow[j];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::JointAabb(a, srcs) => {
                    let (m, n) = self.shape(a);
                    let mut da = vec![0.0; m * n];
                    for (out_idx, &src) in srcs.iter().enumerate() {
                        da[src] += self.nodes[i].grad[out_idx];
                    }
                    self.accumulate(a, &da);
                }
                Op::SumAll(a) => {
                    let g = self.nodes[i].grad[0];
                    let (m, n) = self.shape(a);
                    let da = vec![g; m * n];
                    self.accumulate(a, &da);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = self.nodes[i].grad.iter().map(|g| g * c).collect();
                    self.accumulate(a, &da);
                }
                Op::Reshape(a) => {
                    let g = self.nodes[i].grad.clone();
                    self.accumulate(a, &g);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(node.grad.len(), contrib.len());
        for (g, c) in node.grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }
}

/// `out += a·b` for row-major flat matrices. The i-k-j order keeps the inner
/// loop contiguous on both operands.
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}
