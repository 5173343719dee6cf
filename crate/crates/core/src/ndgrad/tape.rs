use super::kernels::{self, add_into, axpy};
use super::tensor::numel;
use super::{GradError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Gelu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// How the right operand of a binary op maps onto the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// Right operand repeats along the leading axis of the left operand.
    Rows,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulT { a: Var, b: Var },
    Binary { kind: BinaryKind, a: Var, b: Var, bcast: Bcast },
    Scale { a: Var, c: T },
    Unary { kind: UnaryKind, a: Var },
    Reduce { kind: ReduceKind, a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { a: Var },
    IndexSelect { a: Var, idx: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Reshape { a: Var },
    BceLogits { a: Var, targets: Vec<T>, weights: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
}

/// Records operations in execution order and replays them backwards.
///
/// Nodes are appended only after their inputs exist, so the node list is a
/// topological order. Leaf gradients persist across `backward` calls and
/// accumulate until [`Tape::zero_grad`].
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    checked: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new(), checked: false }
    }

    /// A tape that rejects non-finite values and `log` of non-positive inputs.
    pub fn checked() -> Self {
        Self { checked: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input handles of a node, in operand order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.inputs_of(&self.nodes[v.0].op)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, t.into_data(), false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, shape, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Vec<T>) -> Result<Var, GradError> {
        if self.checked {
            if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
                return Err(GradError::NonFinite { node: self.nodes.len(), index: pos });
            }
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { op, shape, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::MatMulT { a, b } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Unary { a, .. }
            | Op::Reduce { a, .. }
            | Op::Softmax { a }
            | Op::IndexSelect { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Reshape { a }
            | Op::BceLogits { a, .. } => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols { parts } | Op::ConcatRows { parts } => parts.clone(),
        }
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize), GradError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(GradError::Shape(format!("{what} expects a 2-D tensor, got {s:?}"))),
        }
    }

    // ---- forward ops ----

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(GradError::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(Op::MatMul { a, b }, vec![m, n], out)
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(GradError::Shape(format!(
                "matmul_t inner extents differ: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(Op::MatMulT { a, b }, vec![m, n], out)
    }

    fn bcast(&self, a: Var, b: Var) -> Result<Bcast, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if numel(sb) == 1 {
            Ok(Bcast::Scalar)
        } else if sa.len() >= 2 && (sb == &sa[1..] || (sb.len() == sa.len() && sb[0] == 1 && sb[1..] == sa[1..])) {
            Ok(Bcast::Rows)
        } else {
            Err(GradError::Shape(format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, GradError> {
        let bcast = self.bcast(a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out: Vec<T> = match bcast {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::Rows => {
                let w = bv.len();
                av.iter().enumerate().map(|(i, &x)| f(x, bv[i % w])).collect()
            }
        };
        let shape = self.shape(a).to_vec();
        self.push(Op::Binary { kind, a, b, bcast }, shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, GradError> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale { a, c }, shape, out)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var, GradError> {
        let av = self.value(a);
        if self.checked && kind == UnaryKind::Log {
            if let Some(i) = av.iter().position(|&x| x <= T::zero()) {
                return Err(GradError::Domain(format!(
                    "log of non-positive value {} at index {i}",
                    av[i]
                )));
            }
        }
        let out: Vec<T> = av
            .iter()
            .map(|&x| match kind {
                UnaryKind::Gelu => kernels::gelu(x),
                UnaryKind::Sigmoid => kernels::sigmoid(x),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Abs => x.abs(),
                UnaryKind::Square => x * x,
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Unary { kind, a }, shape, out)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(UnaryKind::Square, a)
    }

    /// Sum or mean over one axis, or over everything when `axis` is `None`.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: Option<usize>) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, numel(&shape), 1, Vec::new()),
            Some(ax) if ax < shape.len() => {
                let mut s = shape.clone();
                s.remove(ax);
                (numel(&shape[..ax]), shape[ax], numel(&shape[ax + 1..]), s)
            }
            Some(ax) => {
                return Err(GradError::Axis { axis: ax, rank: shape.len() });
            }
        };
        let av = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av[(o * len + l) * inner..(o * len + l + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        if kind == ReduceKind::Mean {
            let inv = T::one() / T::lit(len as f64);
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        self.push(Op::Reduce { kind, a, outer, len, inner }, out_shape, out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        self.reduce(ReduceKind::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        self.reduce(ReduceKind::Mean, a, None)
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| GradError::Shape("layer_norm on a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(GradError::Shape(format!(
                "layer_norm over {shape:?} needs gamma/beta of [{d}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= T::zero() {
            return Err(GradError::Domain("layer_norm eps must be positive".into()));
        }
        let rows = numel(&shape) / d;
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, shape, out)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let av = self.value(a);
        let mut out = vec![T::zero(); av.len()];
        for (src, dst) in av.chunks(d).zip(out.chunks_mut(d)) {
            let m = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - m).exp();
                s = s + *o;
            }
            let inv = T::one() / s;
            dst.iter_mut().for_each(|o| *o = *o * inv);
        }
        self.push(Op::Softmax { a }, shape, out)
    }

    /// Gathers rows (slices along axis 0) in `idx` order; duplicates allowed.
    pub fn index_select(&mut self, a: Var, idx: &[usize]) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        let n = *shape.first().ok_or_else(|| GradError::Shape("index_select on a scalar".into()))?;
        if idx.is_empty() {
            return Err(GradError::Shape("index_select with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(GradError::Index { index: bad, len: n });
        }
        let w = numel(&shape[1..]);
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&av[i * w..(i + 1) * w]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        self.push(Op::IndexSelect { a, idx: idx.to_vec() }, out_shape, out)
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, GradError> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(GradError::Shape(format!(
                "column slice {start}..{} out of {c}",
                start + width
            )));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * width);
        for row in av.chunks(c) {
            out.extend_from_slice(&row[start..start + width]);
        }
        self.push(Op::SliceCols { a, start }, vec![r, width], out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let r = self.dims2(*parts.first().ok_or_else(|| GradError::Shape("empty concat".into()))?, "concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(GradError::Shape(format!("concat_cols row mismatch {pr} vs {r}")));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        self.push(Op::ConcatCols { parts: parts.to_vec() }, vec![r, total], out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let c = self.dims2(*parts.first().ok_or_else(|| GradError::Shape("empty concat".into()))?, "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(GradError::Shape(format!("concat_rows column mismatch {pc} vs {c}")));
            }
            rows += pr;
            out.extend_from_slice(self.value(p));
        }
        self.push(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, c], out)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, GradError> {
        if numel(&shape) != self.value(a).len() || shape.iter().any(|&d| d == 0) {
            return Err(GradError::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        self.push(Op::Reshape { a }, shape, out)
    }

    /// Weighted binary cross-entropy on logits, summed:
    /// `Σ wᵢ [max(xᵢ,0) − xᵢ·pᵢ + ln(1 + e^{−|xᵢ|})]`.
    ///
    /// Targets may be soft (any value in `[0, 1]`).
    pub fn bce_with_logits(&mut self, a: Var, targets: &[T], weights: &[T]) -> Result<Var, GradError> {
        let n = self.value(a).len();
        if targets.len() != n || weights.len() != n {
            return Err(GradError::Shape(format!(
                "bce over {n} logits given {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let av = self.value(a);
        let mut total = T::zero();
        for i in 0..n {
            let x = av[i];
            let term = x.max(T::zero()) - x * targets[i] + (-x.abs()).exp().ln_1p();
            total = total + weights[i] * term;
        }
        self.push(
            Op::BceLogits { a, targets: targets.to_vec(), weights: weights.to_vec() },
            Vec::new(),
            vec![total],
        )
    }

    // ---- reverse pass ----

    /// Drops every node recorded after the first `len`, with their gradients.
    ///
    /// Handles to dropped nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.leaf_grads.truncate(len);
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Gradient accumulated on a leaf, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad mirrors shape"))
    }

    /// Populates `∂loss/∂leaf` for every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        if self.value(loss).len() != 1 {
            return Err(GradError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let end = loss.0 + 1;
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; end];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            self.backprop_node(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn backprop_node(&mut self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<(), GradError> {
        if self.checked {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(GradError::NonFinite { node: i, index: pos });
            }
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                if node.requires_grad {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => add_into(acc, &g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |da| kernels::matmul_nt(&g, bv, da, m, n, k));
                self.accumulate(grads, *b, |db| kernels::matmul_tn(av, &g, db, m, k, n));
            }
            Op::MatMulT { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |da| kernels::matmul_nn(&g, bv, da, m, n, k));
                self.accumulate(grads, *b, |db| kernels::matmul_tn(&g, av, db, m, n, k));
            }
            Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let w = bv.len();
                let bidx = |j: usize| match bcast {
                    Bcast::Same => j,
                    Bcast::Scalar => 0,
                    Bcast::Rows => j % w,
                };
                self.accumulate(grads, *a, |da| match kind {
                    BinaryKind::Add | BinaryKind::Sub => add_into(da, &g),
                    BinaryKind::Mul => {
                        for j in 0..da.len() {
                            da[j] = da[j] + g[j] * bv[bidx(j)];
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for j in 0..g.len() {
                        let contrib = match kind {
                            BinaryKind::Add => g[j],
                            BinaryKind::Sub => -g[j],
                            BinaryKind::Mul => g[j] * av[j],
                        };
                        let t = bidx(j);
                        db[t] = db[t] + contrib;
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accumulate(grads, *a, |da| axpy(c, &g, da));
            }
            Op::Unary { kind, a } => {
                let (xv, yv) = (self.value(*a), &node.value);
                self.accumulate(grads, *a, |da| {
                    for j in 0..da.len() {
                        let local = match kind {
                            UnaryKind::Gelu => kernels::gelu_grad(xv[j]),
                            UnaryKind::Sigmoid => yv[j] * (T::one() - yv[j]),
                            UnaryKind::Exp => yv[j],
                            UnaryKind::Log => T::one() / xv[j],
                            UnaryKind::Abs => {
                                if xv[j] > T::zero() {
                                    T::one()
                                } else if xv[j] < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Square => T::lit(2.0) * xv[j],
                        };
                        da[j] = da[j] + g[j] * local;
                    }
                });
            }
            Op::Reduce { kind, a, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let factor = match kind {
                    ReduceKind::Sum => T::one(),
                    ReduceKind::Mean => T::one() / T::lit(len as f64),
                };
                self.accumulate(grads, *a, |da| {
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                            axpy(factor, go, dst);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let gv = self.value(*gamma);
                let rows = rstd.len();
                self.accumulate(grads, *gamma, |dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |db| {
                    for r in 0..rows {
                        add_into(db, &g[r * d..(r + 1) * d]);
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                            s1 = s1 + dxhat[j];
                            s2 = s2 + dxhat[j] * xh[j];
                        }
                        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
                        for j in 0..d {
                            dx[r * d + j] = dx[r * d + j] + rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let d = *node.shape.last().unwrap_or(&1);
                let yv = &node.value;
                self.accumulate(grads, *a, |da| {
                    for ((y, gr), dst) in yv.chunks(d).zip(g.chunks(d)).zip(da.chunks_mut(d)) {
                        let s: T = y.iter().zip(gr).map(|(&yy, &gg)| yy * gg).sum();
                        for j in 0..d {
                            dst[j] = dst[j] + y[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::IndexSelect { a, idx } => {
                let w = numel(&self.shape(*a)[1..]);
                self.accumulate(grads, *a, |da| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut da[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let c = self.shape(*a)[1];
                let width = node.shape[1];
                let start = *start;
                self.accumulate(grads, *a, |da| {
                    for (r, gr) in g.chunks(width).enumerate() {
                        add_into(&mut da[r * c + start..r * c + start + width], gr);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    self.accumulate(grads, p, |dp| {
                        for (r, dst) in dp.chunks_mut(pc).enumerate() {
                            add_into(dst, &g[r * total + off..r * total + off + pc]);
                        }
                    });
                    off += pc;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |dp| add_into(dp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, |da| add_into(da, &g));
            }
            Op::BceLogits { a, targets, weights } => {
                let xv = self.value(*a);
                let g0 = g[0];
                self.accumulate(grads, *a, |da| {
                    for j in 0..da.len() {
                        da[j] = da[j] + g0 * weights[j] * (kernels::sigmoid(xv[j]) - targets[j]);
                    }
                });
            }
        }
        Ok(())
    }
}
