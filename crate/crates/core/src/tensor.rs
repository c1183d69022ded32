//! Dense float64 tensors and a reverse-mode tape.
//!
//! Every op appends one node to the [`Tape`]; [`Tape::backward`] walks the
//! nodes in exact reverse recording order. Storage is row-major and
//! contiguous, without views.

use crate::error::{Error, Result};

/// Dense row-major array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// `[1 × n]` row vector. Panics on an empty vector.
    pub fn row(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "row vector needs at least one value");
        Self {
            shape: vec![1, data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![delta.len()],
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// (outer, axis length, inner) decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn at(&self, o: usize, a: usize, i: usize) -> usize {
        (o * self.len + a) * self.inner + i
    }
}

#[derive(Debug)]
struct GruCache {
    rows: usize,
    hidden: usize,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { a: Var, row: Var, cols: usize },
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Reshape(Var),
    Sum(Var),
    Concat { inputs: Vec<Var>, outer: usize, chunks: Vec<usize> },
    Slice { a: Var, split: AxisSplit, start: usize, len: usize },
    MeanPool { a: Var, split: AxisSplit, mask: Option<Vec<bool>>, count: usize },
    Softmax { a: Var, split: AxisSplit },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Gru { x: Var, h: Var, w_i: Var, w_h: Var, b_i: Var, b_h: Var, cache: GruCache },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    tainted: bool,
}

/// Ordered record of primitive ops. Inputs of every node precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// Weights of one GRU cell, gate blocks ordered reset, update, candidate.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    /// `[d_in × 3d_h]`
    pub w_input: Var,
    /// `[d_h × 3d_h]`
    pub w_hidden: Var,
    /// `[3d_h]`
    pub b_input: Var,
    /// `[3d_h]`
    pub b_hidden: Var,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.data.clone(),
            grad: self.grad(v).map(<[f64]>::to_vec),
            requires_grad: node.requires_grad,
        }
    }

    /// Accumulated gradient of a leaf, present once a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.leaf_grads.truncate(len);
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// Marks a node so that every op consuming it, directly or not, is flagged.
    pub fn taint(&mut self, v: Var) {
        self.nodes[v.0].tainted = true;
    }

    pub fn is_tainted(&self, v: Var) -> bool {
        self.nodes[v.0].tainted
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            data: t.data.clone(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
            tainted: false,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::zeros(shape)?;
        Ok(self.leaf(&t))
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let tainted = inputs.iter().any(|v| self.nodes[v.0].tainted);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            tainted,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension {
                op,
                left: other.to_vec(),
                right: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        self.push("transpose", vec![cols, rows], out, Op::Transpose { a, rows, cols }, &[a])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m × n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::Dimension {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let src = self.value(a);
        let r = self.value(row);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(src[i * n..(i + 1) * n].iter().zip(r).map(|(x, y)| x + y));
        }
        self.push("add_row", vec![m, n], out, Op::AddRow { a, row, cols: n }, &[a, row])
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "softplus", softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::contract("ln of a non-positive value"));
        }
        self.unary(a, "ln", f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "square", |x| x * x, Op::Square(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        validate_shape(&shape)?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let data = self.value(a).to_vec();
        self.push("reshape", shape, data, Op::Reshape(a), &[a])
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    fn check_axis(&self, v: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(v).len() {
            return Err(Error::Dimension {
                op,
                left: self.shape(v).to_vec(),
                right: vec![axis],
            });
        }
        Ok(())
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let chunks: Vec<usize> = inputs
            .iter()
            .map(|&v| self.value(v).len() / outer)
            .collect();
        let mut out = Vec::with_capacity(outer * chunks.iter().sum::<usize>());
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v)[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", shape, out, Op::Concat { inputs: inputs.to_vec(), outer, chunks }, inputs)
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis, "slice")?;
        let split = AxisSplit::of(self.shape(a), axis);
        if len == 0 || start + len > split.len {
            return Err(Error::Dimension {
                op: "slice",
                left: self.shape(a).to_vec(),
                right: vec![start, len],
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(split.outer * len * split.inner);
        for o in 0..split.outer {
            let lo = split.at(o, start, 0);
            out.extend_from_slice(&src[lo..lo + len * split.inner]);
        }
        let mut shape = self.shape(a).to_vec();
        shape[axis] = len;
        self.push("slice", shape, out, Op::Slice { a, split, start, len }, &[a])
    }

    /// Row `i` of a matrix as a `[1 × n]` tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice(a, 0, i, 1)
    }

    /// Mean along `axis`, keeping it as extent 1; masked-out entries are ignored.
    pub fn mean_pool(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_axis(a, axis, "mean_pool")?;
        let split = AxisSplit::of(self.shape(a), axis);
        if let Some(m) = mask {
            if m.len() != split.len {
                return Err(Error::Dimension {
                    op: "mean_pool",
                    left: self.shape(a).to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let count = mask.map_or(split.len, |m| m.iter().filter(|&&b| b).count());
        if count == 0 {
            return Err(Error::contract("mean_pool over a fully masked axis"));
        }
        let src = self.value(a);
        let mut out = vec![0.0; split.outer * split.inner];
        for o in 0..split.outer {
            for t in 0..split.len {
                if mask.is_some_and(|m| !m[t]) {
                    continue;
                }
                for i in 0..split.inner {
                    out[o * split.inner + i] += src[split.at(o, t, i)];
                }
            }
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let mut shape = self.shape(a).to_vec();
        shape[axis] = 1;
        let mask = mask.map(<[bool]>::to_vec);
        self.push("mean_pool", shape, out, Op::MeanPool { a, split, mask, count }, &[a])
    }

    /// Softmax along `axis`. Masked positions get probability exactly zero.
    pub fn softmax(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let split = AxisSplit::of(self.shape(a), axis);
        if let Some(m) = mask {
            if m.len() != split.len {
                return Err(Error::Dimension {
                    op: "softmax",
                    left: self.shape(a).to_vec(),
                    right: vec![m.len()],
                });
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::contract("softmax over a fully masked axis"));
            }
        }
        let valid = |t: usize| mask.is_none_or(|m| m[t]);
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..split.outer {
            for i in 0..split.inner {
                let max = (0..split.len)
                    .filter(|&t| valid(t))
                    .map(|t| src[split.at(o, t, i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in (0..split.len).filter(|&t| valid(t)) {
                    let e = (src[split.at(o, t, i)] - max).exp();
                    out[split.at(o, t, i)] = e;
                    total += e;
                }
                for t in (0..split.len).filter(|&t| valid(t)) {
                    out[split.at(o, t, i)] /= total;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("softmax", shape, out, Op::Softmax { a, split }, &[a])
    }

    /// Rows of `table` selected by `ids`, shape `[ids.len() × dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, dim) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup of an empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Vocabulary { id: bad, size: rows });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        self.push(
            "embedding",
            vec![ids.len(), dim],
            out,
            Op::Embedding { table, ids: ids.to_vec(), dim },
            &[table],
        )
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if rows != targets.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: vec![rows, vocab],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Vocabulary { id: bad, size: vocab });
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; src.len()];
        let mut nll = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * vocab..(r + 1) * vocab];
            let lse = log_sum_exp(row);
            nll -= row[t] - lse;
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        self.push(
            "cross_entropy",
            vec![1],
            vec![nll],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// One GRU update over a batch of rows.
    ///
    /// `r = σ(x·Wr + h·Ur)`, `z = σ(x·Wz + h·Uz)`, `h̃ = tanh(x·Wn + r ⊙ (h·Un))`,
    /// `h' = (1 − z) ⊙ h + z ⊙ h̃` (biases omitted). An update gate near zero
    /// carries `h` through unchanged.
    pub fn gru_cell(&mut self, x: Var, h: Var, w: GruWeights) -> Result<Var> {
        let (rows, d_in) = self.dims2(x, "gru_cell")?;
        let (h_rows, hidden) = self.dims2(h, "gru_cell")?;
        let mismatch = |t: &Self, v: Var| Error::Dimension {
            op: "gru_cell",
            left: t.shape(x).to_vec(),
            right: t.shape(v).to_vec(),
        };
        if h_rows != rows {
            return Err(mismatch(self, h));
        }
        if self.shape(w.w_input) != [d_in, 3 * hidden] {
            return Err(mismatch(self, w.w_input));
        }
        if self.shape(w.w_hidden) != [hidden, 3 * hidden] {
            return Err(mismatch(self, w.w_hidden));
        }
        for b in [w.b_input, w.b_hidden] {
            if self.value(b).len() != 3 * hidden {
                return Err(mismatch(self, b));
            }
        }
        let g = 3 * hidden;
        let mut gi = matmul_raw(self.value(x), self.value(w.w_input), rows, d_in, g);
        let mut gh = matmul_raw(self.value(h), self.value(w.w_hidden), rows, hidden, g);
        add_bias(&mut gi, self.value(w.b_input));
        add_bias(&mut gh, self.value(w.b_hidden));
        let hv = self.value(h);
        let size = rows * hidden;
        let (mut r, mut z, mut n, mut gh_n) = (
            Vec::with_capacity(size),
            Vec::with_capacity(size),
            Vec::with_capacity(size),
            Vec::with_capacity(size),
        );
        let mut out = Vec::with_capacity(size);
        for row in 0..rows {
            let gi = &gi[row * g..(row + 1) * g];
            let gh = &gh[row * g..(row + 1) * g];
            for j in 0..hidden {
                let rj = sigmoid(gi[j] + gh[j]);
                let zj = sigmoid(gi[hidden + j] + gh[hidden + j]);
                let ghn = gh[2 * hidden + j];
                let nj = (gi[2 * hidden + j] + rj * ghn).tanh();
                let hp = hv[row * hidden + j];
                out.push(hp + zj * (nj - hp));
                r.push(rj);
                z.push(zj);
                n.push(nj);
                gh_n.push(ghn);
            }
        }
        let cache = GruCache { rows, hidden, r, z, n, gh_n };
        let op = Op::Gru {
            x,
            h,
            w_i: w.w_input,
            w_h: w.w_hidden,
            b_i: w.b_input,
            b_h: w.b_hidden,
            cache,
        };
        self.push(
            "gru_cell",
            vec![rows, hidden],
            out,
            op,
            &[x, h, w.w_input, w.w_hidden, w.b_input, w.b_hidden],
        )
    }

    /// Reverse-mode pass from a one-element `loss`.
    ///
    /// Leaf gradients are added into their buffers, so repeated calls without
    /// [`Tape::zero_grad`] accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = self.leaf_grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, d) in slot.iter_mut().zip(&g) {
                    *s += d;
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].data.as_slice();
        let mut acc = |v: Var, delta: Vec<f64>| accumulate(grads, v, delta);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    // dA = dC · Bᵀ
                    let bv = val(b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    acc(a, da);
                }
                if wants(b) {
                    // dB = Aᵀ · dC
                    acc(b, matmul_tn(val(a), g, m, k, n));
                }
            }
            &Op::Transpose { a, rows, cols } => {
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        da[i * cols + j] = g[j * rows + i];
                    }
                }
                acc(a, da);
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(b) {
                    acc(b, g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(b) {
                    acc(b, g.iter().map(|x| -x).collect());
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if wants(b) {
                    acc(b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    acc(a, g.iter().zip(bv).map(|(g, y)| g / y).collect());
                }
                if wants(b) {
                    let db = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    acc(b, db);
                }
            }
            &Op::AddRow { a, row, cols } => {
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(row) {
                    let mut dr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    acc(row, dr);
                }
            }
            &Op::Scale(a, c) => acc(a, g.iter().map(|x| x * c).collect()),
            &Op::AddScalar(a) | &Op::Reshape(a) => acc(a, g.to_vec()),
            &Op::Tanh(a) => {
                let y = &node.data;
                acc(a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            &Op::Sigmoid(a) => {
                let y = &node.data;
                acc(a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            &Op::Softplus(a) => {
                acc(a, g.iter().zip(val(a)).map(|(g, &x)| g * sigmoid(x)).collect());
            }
            &Op::Exp(a) => {
                let y = &node.data;
                acc(a, g.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            &Op::Ln(a) => acc(a, g.iter().zip(val(a)).map(|(g, x)| g / x).collect()),
            &Op::Square(a) => {
                acc(a, g.iter().zip(val(a)).map(|(g, x)| 2.0 * g * x).collect());
            }
            &Op::Sum(a) => acc(a, vec![g[0]; val(a).len()]),
            Op::Concat { inputs, outer, chunks } => {
                let width: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    if wants(v) {
                        let mut dv = Vec::with_capacity(outer * c);
                        for o in 0..*outer {
                            let lo = o * width + offset;
                            dv.extend_from_slice(&g[lo..lo + c]);
                        }
                        acc(v, dv);
                    }
                    offset += c;
                }
            }
            &Op::Slice { a, split, start, len } => {
                let mut da = vec![0.0; split.outer * split.len * split.inner];
                let block = len * split.inner;
                for o in 0..split.outer {
                    let lo = split.at(o, start, 0);
                    da[lo..lo + block].copy_from_slice(&g[o * block..(o + 1) * block]);
                }
                acc(a, da);
            }
            Op::MeanPool { a, split, mask, count } => {
                let inv = 1.0 / *count as f64;
                let mut da = vec![0.0; split.outer * split.len * split.inner];
                for o in 0..split.outer {
                    for t in 0..split.len {
                        if mask.as_ref().is_some_and(|m| !m[t]) {
                            continue;
                        }
                        for i in 0..split.inner {
                            da[split.at(o, t, i)] = g[o * split.inner + i] * inv;
                        }
                    }
                }
                acc(*a, da);
            }
            &Op::Softmax { a, split } => {
                let y = &node.data;
                let mut da = vec![0.0; y.len()];
                for o in 0..split.outer {
                    for i in 0..split.inner {
                        let dot: f64 = (0..split.len)
                            .map(|t| {
                                let at = split.at(o, t, i);
                                y[at] * g[at]
                            })
                            .sum();
                        for t in 0..split.len {
                            let at = split.at(o, t, i);
                            da[at] = y[at] * (g[at] - dot);
                        }
                    }
                }
                acc(a, da);
            }
            Op::Embedding { table, ids, dim } => {
                let mut dt = vec![0.0; val(*table).len()];
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..*dim {
                        dt[id * dim + j] += g[pos * dim + j];
                    }
                }
                acc(*table, dt);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = probs.len() / targets.len();
                let mut dl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * vocab + t] -= g[0];
                }
                acc(*logits, dl);
            }
            Op::Gru { x, h, w_i, w_h, b_i, b_h, cache } => {
                let (rows, hidden) = (cache.rows, cache.hidden);
                let gates = 3 * hidden;
                let hv = val(*h);
                let mut dgi = vec![0.0; rows * gates];
                let mut dgh = vec![0.0; rows * gates];
                let mut dh = vec![0.0; rows * hidden];
                for row in 0..rows {
                    for j in 0..hidden {
                        let at = row * hidden + j;
                        let (r, z, n, ghn) = (cache.r[at], cache.z[at], cache.n[at], cache.gh_n[at]);
                        let dout = g[at];
                        let dz = dout * (n - hv[at]);
                        let dpre_n = dout * z * (1.0 - n * n);
                        let dpre_r = dpre_n * ghn * r * (1.0 - r);
                        let dpre_z = dz * z * (1.0 - z);
                        dh[at] = dout * (1.0 - z);
                        let base = row * gates;
                        dgi[base + j] = dpre_r;
                        dgi[base + hidden + j] = dpre_z;
                        dgi[base + 2 * hidden + j] = dpre_n;
                        dgh[base + j] = dpre_r;
                        dgh[base + hidden + j] = dpre_z;
                        dgh[base + 2 * hidden + j] = dpre_n * r;
                    }
                }
                let d_in = val(*x).len() / rows;
                if wants(*x) {
                    acc(*x, matmul_nt(&dgi, val(*w_i), rows, gates, d_in));
                }
                if wants(*h) {
                    let extra = matmul_nt(&dgh, val(*w_h), rows, gates, hidden);
                    acc(*h, dh.iter().zip(extra).map(|(a, b)| a + b).collect());
                }
                if wants(*w_i) {
                    acc(*w_i, matmul_tn(val(*x), &dgi, rows, d_in, gates));
                }
                if wants(*w_h) {
                    acc(*w_h, matmul_tn(hv, &dgh, rows, hidden, gates));
                }
                if wants(*b_i) {
                    acc(*b_i, column_sums(&dgi, gates));
                }
                if wants(*b_h) {
                    acc(*b_h, column_sums(&dgh, gates));
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `Aᵀ · G` for `A: [m × k]`, `G: [m × n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// `G · Wᵀ` for `G: [m × n]`, `W: [k × n]`.
fn matmul_nt(g: &[f64], w: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = grow.iter().zip(&w[p * n..(p + 1) * n]).map(|(a, b)| a * b).sum();
        }
    }
    out
}

fn add_bias(m: &mut [f64], bias: &[f64]) {
    for chunk in m.chunks_mut(bias.len()) {
        for (x, b) in chunk.iter_mut().zip(bias) {
            *x += b;
        }
    }
}

fn column_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for chunk in m.chunks(cols) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
