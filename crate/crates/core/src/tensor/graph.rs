use std::collections::HashMap;

use rand::Rng;

use super::kernels;
use super::{ParamId, ParamStore, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Reshape { a: Var },
    Add { a: Var, b: Var, bcast: bool },
    Sub { a: Var, b: Var, bcast: bool },
    Mul { a: Var, b: Var, bcast: bool },
    Scale { a: Var, c: T },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, index: Vec<Option<usize>> },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Dropout { a: Var, keep: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum { a: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for backpropagation and the graph is acyclic by
/// construction.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    check_finite: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: false,
        }
    }

    /// Debug mode: every op fails with `NonFiniteDetected` if its output
    /// contains NaN or infinity.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass w.r.t. `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var, TensorError> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFiniteDetected(name));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input (no gradient is propagated into it).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            grad: None,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            grad: None,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Pulls a stored parameter onto the tape; repeated calls reuse the leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            grad: None,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool), TensorError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let bcast = if av.shape() == bv.shape() {
            false
        } else if bv.numel() == av.cols() && bv.rows() == 1 {
            true
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        let bd = bv.data();
        let n = bd.len().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, if bcast { bd[i % n] } else { bd[i] }))
            .collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, bcast))
    }

    /// `a + b`; `b` may be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, bcast) = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add { a, b, bcast }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, bcast) = self.elementwise("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub { a, b, bcast }, rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, bcast) = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul { a, b, bcast }, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * c).collect())?;
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, c }, rg, "scale")
    }

    /// `a[.., k] · b[k, n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let data = kernels::matmul(av.data(), m, k, bv.data(), n);
        let mut shape = av.shape().to_vec();
        if shape.is_empty() {
            shape.push(n);
        } else {
            *shape.last_mut().unwrap() = n;
        }
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMul { a, b }, rg, "matmul")
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 {
            return Err(TensorError::InvalidArgument(format!(
                "transpose needs rank 2, got {:?}",
                av.shape()
            )));
        }
        let (r, c) = (av.rows(), av.cols());
        let t = Tensor::new(vec![c, r], kernels::transpose(av.data(), r, c))?;
        let rg = self.rg(a);
        self.push(t, Op::Transpose { a }, rg, "transpose")
    }

    /// Concatenates matrices with equal row counts along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::ConcatCols { parts: parts.to_vec() }, rg, "concat_cols")
    }

    /// `concat_last_dim(a, b)`.
    pub fn concat_last_dim(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.concat_cols(&[a, b])
    }

    /// Stacks matrices with equal column counts (zero-row parts are allowed).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::ConcatRows { parts: parts.to_vec() }, rg, "concat_rows")
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let t = Tensor::new(shape.to_vec(), av.data().to_vec()).map_err(|_| TensorError::ShapeMismatch {
            op: "reshape",
            lhs: av.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape { a }, rg, "reshape")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows(), av.cols());
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(a);
        self.push(t, Op::SliceCols { a, start }, rg, "slice_cols")
    }

    /// Gathers rows of `a`; a `None` index yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: &[Option<usize>]) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(index.len() * cols);
        for &ix in index {
            match ix {
                Some(i) if i < rows => data.extend_from_slice(av.row(i)),
                Some(i) => {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        len: rows,
                    })
                }
                None => data.extend(std::iter::repeat_n(T::zero(), cols)),
            }
        }
        let t = Tensor::new(vec![index.len(), cols], data)?;
        let rg = self.rg(a);
        self.push(
            t,
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Row lookup into an embedding table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let index: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.gather_rows(table, &index)
    }

    /// Softmax over the last dimension. Entries where `mask` is false get
    /// probability exactly zero.
    pub fn softmax_last_dim(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let data = kernels::softmax_rows(xv.data(), xv.cols(), mask);
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Softmax { a: x }, rg, "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        if gv.numel() != xv.cols() || bv.numel() != xv.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let (y, mean, rstd) = kernels::layer_norm_rows(xv.data(), xv.cols(), gv.data(), bv.data());
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| kernels::gelu(x)).collect())?;
        let rg = self.rg(a);
        self.push(t, Op::Gelu { a }, rg, "gelu")
    }

    /// Inverted dropout. Identity when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R, train: bool) -> Result<Var, TensorError> {
        if !train || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(TensorError::InvalidArgument(format!("dropout p must be < 1, got {p}")));
        }
        let scale = T::of(1.0 / (1.0 - p));
        let av = &self.nodes[a.0].value;
        let keep: Vec<T> = (0..av.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect();
        let data = av.data().iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Dropout { a, keep }, rg, "dropout")
    }

    /// Mean over rows of the masked negative log-likelihood of `targets`.
    ///
    /// `mask`, when given, has one flag per logit; every target must be
    /// unmasked.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let lv = &self.nodes[logits.0].value;
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows || rows == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(m) = mask {
            if m.len() != lv.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: lv.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let probs = kernels::softmax_rows(lv.data(), cols, mask);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: cols,
                });
            }
            if mask.is_some_and(|m| !m[r * cols + t]) {
                return Err(TensorError::InvalidArgument(format!(
                    "target {t} of row {r} is masked out"
                )));
            }
            total = total - kernels::log_softmax_at(&lv.data()[r * cols..(r + 1) * cols], mask.map(|m| &m[r * cols..(r + 1) * cols]), t);
        }
        let loss = total / T::of(rows as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg, "sum")
    }

    fn accumulate(&mut self, v: Var, g: &[T]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a = *a + x;
                }
            }
            None => node.grad = Some(g.to_vec()),
        }
    }

    /// Accumulates into `v` a gradient given for a row-broadcast operand.
    fn accumulate_bcast(&mut self, v: Var, g: &[T], bcast: bool) {
        if !bcast {
            self.accumulate(v, g);
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let mut red = vec![T::zero(); n];
        for row in g.chunks(n) {
            for (r, &x) in red.iter_mut().zip(row) {
                *r = *r + x;
            }
        }
        self.accumulate(v, &red);
    }

    /// Backpropagates from a scalar `loss`, overwriting gradients of any
    /// previous pass on this graph.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Reshape { a } => self.accumulate(*a, g),
            Op::Add { a, b, bcast } => {
                self.accumulate(*a, g);
                self.accumulate_bcast(*b, g, *bcast);
            }
            Op::Sub { a, b, bcast } => {
                self.accumulate(*a, g);
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                self.accumulate_bcast(*b, &neg, *bcast);
            }
            Op::Mul { a, b, bcast } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let n = bv.len().max(1);
                let bi = |k: usize| if *bcast { bv[k % n] } else { bv[k] };
                let ga: Vec<T> = g.iter().enumerate().map(|(k, &x)| x * bi(k)).collect();
                let gb: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                self.accumulate(*a, &ga);
                self.accumulate_bcast(*b, &gb, *bcast);
            }
            Op::Scale { a, c } => {
                let ga: Vec<T> = g.iter().map(|&x| x * *c).collect();
                self.accumulate(*a, &ga);
            }
            Op::MatMul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let ga = if self.rg(*a) {
                    Some(kernels::matmul_bt(g, m, n, bv.data(), k))
                } else {
                    None
                };
                let gb = if self.rg(*b) {
                    Some(kernels::matmul_at(av.data(), m, k, g, n))
                } else {
                    None
                };
                if let Some(ga) = ga {
                    self.accumulate(*a, &ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(*b, &gb);
                }
            }
            Op::Transpose { a } => {
                let v = &self.nodes[i].value;
                let ga = kernels::transpose(g, v.rows(), v.cols());
                self.accumulate(*a, &ga);
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.cols();
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    self.accumulate(p, &gp);
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.accumulate(p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceCols { a, start } => {
                let av = &self.nodes[a.0].value;
                let (rows, cols) = (av.rows(), av.cols());
                let len = self.nodes[i].value.cols();
                let mut ga = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    ga[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(*a, &ga);
            }
            Op::GatherRows { a, index } => {
                let av = &self.nodes[a.0].value;
                let cols = av.cols();
                let mut ga = vec![T::zero(); av.numel()];
                for (k, ix) in index.iter().enumerate() {
                    if let Some(r) = ix {
                        for j in 0..cols {
                            ga[r * cols + j] = ga[r * cols + j] + g[k * cols + j];
                        }
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Softmax { a } => {
                let p = self.nodes[i].value.data();
                let cols = self.nodes[i].value.cols().max(1);
                let mut ga = vec![T::zero(); p.len()];
                for ((prow, grow), out) in p.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let mut dot = T::zero();
                    for (&pp, &gg) in prow.iter().zip(grow) {
                        dot = dot + pp * gg;
                    }
                    for ((o, &pp), &gg) in out.iter_mut().zip(prow).zip(grow) {
                        *o = pp * (gg - dot);
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gain.0].value.data();
                let cols = self.nodes[x.0].value.cols();
                let n = T::of(cols as f64);
                let mut gx = vec![T::zero(); xv.len()];
                let mut ggain = vec![T::zero(); cols];
                let mut gbias = vec![T::zero(); cols];
                for r in 0..mean.len() {
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..cols {
                        let xhat = (xr[j] - mu) * rs;
                        let dxhat = gr[j] * gv[j];
                        ggain[j] = ggain[j] + gr[j] * xhat;
                        gbias[j] = gbias[j] + gr[j];
                        s1 = s1 + dxhat;
                        s2 = s2 + dxhat * xhat;
                    }
                    for j in 0..cols {
                        let xhat = (xr[j] - mu) * rs;
                        let dxhat = gr[j] * gv[j];
                        gx[r * cols + j] = rs * (dxhat - s1 / n - xhat * s2 / n);
                    }
                }
                self.accumulate(*x, &gx);
                self.accumulate(*gain, &ggain);
                self.accumulate(*bias, &gbias);
            }
            Op::Gelu { a } => {
                let av = self.nodes[a.0].value.data();
                let ga: Vec<T> = g.iter().zip(av).map(|(&gg, &x)| gg * kernels::gelu_grad(x)).collect();
                self.accumulate(*a, &ga);
            }
            Op::Dropout { a, keep } => {
                let ga: Vec<T> = g.iter().zip(keep).map(|(&gg, &k)| gg * k).collect();
                self.accumulate(*a, &ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let scale = g[0] / T::of(rows as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * cols + t] = gl[r * cols + t] - scale;
                }
                self.accumulate(*logits, &gl);
            }
            Op::Sum { a } => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(*a, &vec![g[0]; n]);
            }
        }
        self.nodes[i].op = op;
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = &self.nodes[v.0].grad {
                let p = store.get_mut(id);
                for (a, &x) in p.grad.iter_mut().zip(g) {
                    *a = *a + x;
                }
            }
        }
    }
}
