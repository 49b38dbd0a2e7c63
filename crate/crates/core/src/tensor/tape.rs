use super::kernels::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside this module:
/// `(input values, output value, output grad) -> one grad per input`.
pub type CustomBackward<T> = Box<dyn Fn(&[&[T]], &[T], &[T]) -> Vec<Vec<T>> + Send + Sync>;

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Embedding { table: Var, ids: Vec<usize> },
    L2Normalize(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Extract { x: Var, offset: usize },
    Reshape(Var),
    Sum(Var),
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::L2Normalize(a)
            | Op::Reshape(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::SliceCols { x, .. } | Op::SelectRows { x, .. } | Op::Extract { x, .. } => vec![*x],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// True when some `requires_grad` leaf is an ancestor (or this is one).
    tracked: bool,
    retain: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order by
/// construction. A tape has a single writer.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            op,
            tracked,
            retain: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether a
    /// gradient is stored for it by [`Tape::backward`].
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let tracked = tensor.requires_grad;
        self.nodes.push(Node {
            value: Tensor {
                grad: None,
                ..tensor
            },
            op: Op::Leaf,
            tracked,
            retain: tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    /// Keep the gradient of an intermediate node after `backward`.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.grad.take()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Contract(format!(
                "{op}: expected a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return shape_err("matmul_nt", self.shape(a), self.shape(b));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_into(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a)))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.data(a).iter().map(|&x| x * c).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Scale(a, c)))
    }

    /// Adds a length-`n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(bias).numel() != n {
            return shape_err("add_row", self.shape(a), self.shape(bias));
        }
        let b = self.data(bias);
        let out = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, bias)))
    }

    /// GELU, tanh approximation with cubic coefficient 0.044715.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Gelu(a)))
    }

    // ── Normalization ────────────────────────────────────────────────

    /// Row softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if n == 0 {
            return Err(TensorError::Contract("softmax_rows: empty rows".into()));
        }
        let src = self.data(a);
        if src.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row, dst);
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm: eps must be positive".into()));
        }
        let n = self.value(x).cols();
        if self.value(gamma).numel() != n {
            return shape_err("layer_norm", self.shape(x), self.shape(gamma));
        }
        if self.value(beta).numel() != n {
            return shape_err("layer_norm", self.shape(x), self.shape(beta));
        }
        let eps = T::of(eps);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(n) {
            let (mean, rstd) = row_stats(row, eps);
            out.extend(
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(&v, (&gi, &bi))| (v - mean) * rstd * gi + bi),
            );
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        ))
    }

    /// Scales a tensor, viewed as one flat vector, to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let norm = l2_norm(self.data(a));
        if norm.as_f64() <= 1e-12 || !norm.is_finite() {
            return Err(TensorError::Degenerate {
                norm: norm.as_f64(),
            });
        }
        let out = self.data(a).iter().map(|&v| v / norm).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::L2Normalize(a)))
    }

    // ── Indexing and layout ──────────────────────────────────────────

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    len: vocab,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols: no inputs".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return shape_err("concat_cols", self.shape(first), self.shape(p));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows: no inputs".into()))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return shape_err("concat_rows", self.shape(first), self.shape(p));
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "select_rows")?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::Index {
                    op: "select_rows",
                    index: r,
                    len: m,
                });
            }
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        Ok(self.push(
            vec![rows.len(), n],
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Copies a contiguous block of a flat tensor into a new tensor of `shape`.
    pub fn extract(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let total = self.value(x).numel();
        if offset + len > total {
            return Err(TensorError::Index {
                op: "extract",
                index: offset + len,
                len: total,
            });
        }
        let out = self.data(x)[offset..offset + len].to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Extract { x, offset }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != self.value(x).numel() {
            return shape_err("reshape", self.shape(x), shape);
        }
        let out = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        Ok(self.push(vec![1], vec![s], Op::Sum(x)))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        data: Vec<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return shape_err("custom", &shape, &[data.len()]);
        }
        Ok(self.push(
            shape,
            data,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss with d(loss)/d(loss) = 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_from(&[(loss, vec![T::one()])])
    }

    /// Reverse sweep seeded with explicit output gradients.
    ///
    /// Every tracked node is visited once, in reverse tape order; gradients
    /// are accumulated into inputs in that fixed order.
    pub fn backward_from(&mut self, seeds: &[(Var, Vec<T>)]) -> Result<()> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut top = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).numel() {
                return shape_err("backward seed", self.shape(*v), &[g.len()]);
            }
            accumulate(&mut grads[v.0], g.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            let contributions = self.local_grads(i, &g);
            for (input, c) in contributions {
                if self.nodes[input.0].tracked {
                    accumulate(&mut grads[input.0], c);
                }
            }
            let node = &mut self.nodes[i];
            if node.retain {
                node.value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); k * n];
                if self.nodes[a.0].tracked {
                    matmul_nt_into(g, self.data(*b), &mut da, m, n, k);
                }
                if self.nodes[b.0].tracked {
                    matmul_tn_into(self.data(*a), g, &mut db, m, k, n);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::MatMulNt(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); n * k];
                if self.nodes[a.0].tracked {
                    matmul_into(g, self.data(*b), &mut da, m, n, k);
                }
                if self.nodes[b.0].tracked {
                    matmul_tn_into(g, self.data(*a), &mut db, m, n, k);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                vec![(*a, da)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::AddRow(a, bias) => {
                let n = out.cols();
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*a, g.to_vec()), (*bias, db)]
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(self.data(*b)).map(|(&x, &y)| x * y).collect();
                let db = g.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
            Op::Gelu(a) => {
                let da = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&gv, &x)| gv * gelu_grad(x))
                    .collect();
                vec![(*a, da)]
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let mut da = vec![T::zero(); g.len()];
                for ((y, gy), d) in out.data.chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                    let s: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                    for ((dv, &p), &q) in d.iter_mut().zip(y).zip(gy) {
                        *dv = p * (q - s);
                    }
                }
                vec![(*a, da)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let n = out.cols();
                let xs = self.data(*x);
                let gm = self.data(*gamma);
                let inv_n = T::one() / T::of(n as f64);
                let mut dx = vec![T::zero(); xs.len()];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut xhat = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for ((row, gy), d) in xs.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let (mean, rstd) = row_stats(row, *eps);
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gy[j] * gm[j];
                        dgamma[j] += gy[j] * xhat[j];
                        dbeta[j] += gy[j];
                    }
                    let mean_dxhat: T = dxhat.iter().copied().sum::<T>() * inv_n;
                    let mean_dxhat_xhat: T =
                        dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                    for j in 0..n {
                        d[j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (t, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *t += v;
                    }
                }
                vec![(*table, dt)]
            }
            Op::L2Normalize(a) => {
                let norm = l2_norm(self.data(*a));
                let y = &out.data;
                let proj: T = y.iter().zip(g).map(|(&p, &q)| p * q).sum();
                let da = y
                    .iter()
                    .zip(g)
                    .map(|(&p, &q)| (q - p * proj) / norm)
                    .collect();
                vec![(*a, da)]
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = out.cols();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let m = out.rows();
                let total = out.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    res.push((p, dp));
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.value(p).numel();
                    res.push((p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
                res
            }
            Op::SelectRows { x, rows } => {
                let n = out.cols();
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (r, &src) in rows.iter().enumerate() {
                    for (d, &v) in dx[src * n..(src + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *d += v;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Extract { x, offset } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                dx[*offset..*offset + g.len()].copy_from_slice(g);
                vec![(*x, dx)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Custom { inputs, backward } => {
                let values: Vec<&[T]> = inputs.iter().map(|v| self.data(*v)).collect();
                let gs = backward(&values, &out.data, g);
                inputs.iter().copied().zip(gs).collect()
            }
        }
    }
}

fn softmax_row<T: Scalar>(row: &[T], dst: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = 0f64;
    for (d, &v) in dst.iter_mut().zip(row) {
        *d = (v - max).exp();
        total += d.as_f64();
    }
    let total = T::of(total);
    for d in dst.iter_mut() {
        *d = *d / total;
    }
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    (T::of(mean), T::of(1.0 / (var + eps.as_f64()).sqrt()))
}

fn l2_norm<T: Scalar>(v: &[T]) -> T {
    T::of(v.iter().map(|&x| x.as_f64().powi(2)).sum::<f64>().sqrt())
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_COEF) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_COEF);
    let k = T::of(SQRT_2_OVER_PI);
    let t = (k * (x + c * x * x * x)).tanh();
    let dinner = k * (T::one() + T::of(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}
