use super::tensor::{Scalar, TensorG};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

impl Value {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    /// rows(a) x cols(a) + broadcast row vector b
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Gelu(usize),
    Clamp(usize, f64, f64),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    NormalizeRows(usize, f64),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
        }
    }
}

struct Node<T> {
    op: Op,
    value: TensorG<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Ops execute eagerly, record themselves, and check the
/// result for NaN/Inf; [`Graph::backward`] walks the tape in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &TensorG<T> {
        &self.nodes[v.0].value
    }

    /// Bind a tensor as a leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: &TensorG<T>) -> Value {
        self.push_node(Op::Leaf, t.clone(), t.requires_grad)
    }

    /// Bind a trainable parameter leaf regardless of the tensor's own flag.
    pub fn param(&mut self, t: &TensorG<T>) -> Value {
        self.push_node(Op::Leaf, t.clone(), true)
    }

    /// Bind a non-trainable constant leaf.
    pub fn constant(&mut self, t: &TensorG<T>) -> Value {
        self.push_node(Op::Leaf, t.clone(), false)
    }

    pub fn scalar(&mut self, v: f64) -> Value {
        self.push_node(Op::Leaf, TensorG::scalar(T::of_f64(v)), false)
    }

    fn push_node(&mut self, op: Op, value: TensorG<T>, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: TensorG<T>, inputs: &[usize]) -> Result<Value> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_node(op, value, rg))
    }

    fn shape_err(&self, op: &'static str, a: Value, b: Value) -> Error {
        Error::ShapeMismatch {
            op,
            detail: format!(
                "{:?} vs {:?}",
                self.nodes[a.0].value.dims(),
                self.nodes[b.0].value.dims()
            ),
        }
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let v = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| x + y)
            .map_err(|_| self.shape_err("add", a, b))?;
        self.push(Op::Add(a.0, b.0), v, &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let v = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| x - y)
            .map_err(|_| self.shape_err("sub", a, b))?;
        self.push(Op::Sub(a.0, b.0), v, &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let v = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| x * y)
            .map_err(|_| self.shape_err("mul", a, b))?;
        self.push(Op::Mul(a.0, b.0), v, &[a.0, b.0])
    }

    pub fn neg(&mut self, a: Value) -> Result<Value> {
        let v = self.nodes[a.0].value.map(|x| -x);
        self.push(Op::Neg(a.0), v, &[a.0])
    }

    /// Broadcast-add a row vector (rank-1 or 1 x c) to every row of `a`.
    pub fn add_row(&mut self, a: Value, row: Value) -> Result<Value> {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(self.shape_err("add_row", a, row));
        }
        let cols = av.cols();
        let mut out = av.clone();
        out.requires_grad = false;
        for r in 0..av.rows() {
            let orow = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for (o, &b) in orow.iter_mut().zip(rv.data()) {
                *o = *o + b;
            }
        }
        self.push(Op::AddRow(a.0, row.0), out, &[a.0, row.0])
    }

    pub fn scale(&mut self, a: Value, s: f64) -> Result<Value> {
        let sv = T::of_f64(s);
        let v = self.nodes[a.0].value.map(|x| x * sv);
        self.push(Op::Scale(a.0, s), v, &[a.0])
    }

    pub fn add_scalar(&mut self, a: Value, s: f64) -> Result<Value> {
        let sv = T::of_f64(s);
        let v = self.nodes[a.0].value.map(|x| x + sv);
        self.push(Op::AddScalar(a.0), v, &[a.0])
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        self.push(Op::MatMul(a.0, b.0), v, &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let v = self.nodes[a.0].value.transpose();
        self.push(Op::Transpose(a.0), v, &[a.0])
    }

    pub fn exp(&mut self, a: Value) -> Result<Value> {
        let v = self.nodes[a.0].value.map(|x| x.exp());
        self.push(Op::Exp(a.0), v, &[a.0])
    }

    pub fn ln(&mut self, a: Value) -> Result<Value> {
        let v = self.nodes[a.0].value.map(|x| x.ln());
        self.push(Op::Ln(a.0), v, &[a.0])
    }

    pub fn tanh(&mut self, a: Value) -> Result<Value> {
        let v = self.nodes[a.0].value.map(|x| x.tanh());
        self.push(Op::Tanh(a.0), v, &[a.0])
    }

    pub fn gelu(&mut self, a: Value) -> Result<Value> {
        let v = self.nodes[a.0].value.map(gelu);
        self.push(Op::Gelu(a.0), v, &[a.0])
    }

    pub fn clamp(&mut self, a: Value, lo: f64, hi: f64) -> Result<Value> {
        let (l, h) = (T::of_f64(lo), T::of_f64(hi));
        let v = self.nodes[a.0].value.map(|x| x.max(l).min(h));
        self.push(Op::Clamp(a.0, lo, hi), v, &[a.0])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Value) -> Result<Value> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let mut out = av.clone();
        out.requires_grad = false;
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(Op::SoftmaxRows(a.0), out, &[a.0])
    }

    /// Row-wise layer normalization with learned gain/bias.
    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: f64) -> Result<Value> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x cols {} vs gamma {} / beta {}", c, gv.numel(), bv.numel()),
            });
        }
        let epsv = T::of_f64(eps);
        let mut out = xv.clone();
        out.requires_grad = false;
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / T::from_usize(c).unwrap();
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / T::from_usize(c).unwrap();
            let inv = (var + epsv).sqrt().recip();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gv.data()[j] + bv.data()[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            out,
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Scale each row to unit L2 norm (norm floored at eps).
    pub fn normalize_rows(&mut self, a: Value, eps: f64) -> Result<Value> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let epsv = T::of_f64(eps);
        let mut out = av.clone();
        out.requires_grad = false;
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(epsv);
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
        self.push(Op::NormalizeRows(a.0, eps), out, &[a.0])
    }

    pub fn sum(&mut self, a: Value) -> Result<Value> {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        self.push(Op::Sum(a.0), TensorG::scalar(s), &[a.0])
    }

    pub fn mean(&mut self, a: Value) -> Result<Value> {
        let v = &self.nodes[a.0].value;
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_usize(v.numel()).unwrap();
        self.push(Op::Mean(a.0), TensorG::scalar(m), &[a.0])
    }

    /// Column means: (r x c) -> (1 x c).
    pub fn mean_rows(&mut self, a: Value) -> Result<Value> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(av.row(i)) {
                *o = *o + v;
            }
        }
        let rn = T::from_usize(r).unwrap();
        for o in out.iter_mut() {
            *o = *o / rn;
        }
        let t = TensorG::from_vec(vec![1, c], out)?;
        self.push(Op::MeanRows(a.0), t, &[a.0])
    }

    /// Stack b below a (same column count).
    pub fn concat_rows(&mut self, a: Value, b: Value) -> Result<Value> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.cols() != bv.cols() {
            return Err(self.shape_err("concat_rows", a, b));
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let t = TensorG::from_vec(vec![av.rows() + bv.rows(), c], data)?;
        self.push(Op::ConcatRows(a.0, b.0), t, &[a.0, b.0])
    }

    /// Put b to the right of a (same row count).
    pub fn concat_cols(&mut self, a: Value, b: Value) -> Result<Value> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rows() != bv.rows() {
            return Err(self.shape_err("concat_cols", a, b));
        }
        let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let t = TensorG::from_vec(vec![r, ca + cb], data)?;
        self.push(Op::ConcatCols(a.0, b.0), t, &[a.0, b.0])
    }

    /// Rows [start, end) of a.
    pub fn slice_rows(&mut self, a: Value, start: usize, end: usize) -> Result<Value> {
        let av = &self.nodes[a.0].value;
        if start >= end || end > av.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("[{start}, {end}) of {} rows", av.rows()),
            });
        }
        let c = av.cols();
        let data = av.data()[start * c..end * c].to_vec();
        let t = TensorG::from_vec(vec![end - start, c], data)?;
        self.push(Op::SliceRows(a.0, start, end), t, &[a.0])
    }

    /// Columns [start, end) of a.
    pub fn slice_cols(&mut self, a: Value, start: usize, end: usize) -> Result<Value> {
        let av = &self.nodes[a.0].value;
        if start >= end || end > av.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("[{start}, {end}) of {} cols", av.cols()),
            });
        }
        let (r, c) = (av.rows(), av.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&av.data()[i * c + start..i * c + end]);
        }
        let t = TensorG::from_vec(vec![r, w], data)?;
        self.push(Op::SliceCols(a.0, start, end), t, &[a.0])
    }

    /// Reverse pass from a scalar loss. Returns a gradient table addressed by
    /// node handle; leaves that never influence the loss have no entry.
    pub fn backward(&self, loss: Value) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss { numel: lv.numel() });
        }
        let mut grads: Vec<Option<TensorG<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(TensorG::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    node: id,
                    op: self.nodes[id].op.name(),
                });
            }
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
        }
        Ok(Gradients { by_node: grads })
    }

    fn backprop_node(
        &self,
        id: usize,
        g: &TensorG<T>,
        grads: &mut [Option<TensorG<T>>],
    ) -> Result<()> {
        let acc = |grads: &mut [Option<TensorG<T>>], input: usize, delta: TensorG<T>| {
            match &mut grads[input] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |i: usize| self.nodes[i].requires_grad;
        let val = |i: usize| &self.nodes[i].value;

        match self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    acc(grads, a, g.clone());
                }
                if needs(b) {
                    acc(grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    acc(grads, a, g.clone());
                }
                if needs(b) {
                    acc(grads, b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    acc(grads, a, g.zip_map(val(b), |x, y| x * y)?);
                }
                if needs(b) {
                    acc(grads, b, g.zip_map(val(a), |x, y| x * y)?);
                }
            }
            Op::Neg(a) => {
                if needs(a) {
                    acc(grads, a, g.map(|x| -x));
                }
            }
            Op::AddRow(a, row) => {
                if needs(a) {
                    acc(grads, a, g.clone());
                }
                if needs(row) {
                    let c = g.cols();
                    let mut sum = vec![T::zero(); c];
                    for i in 0..g.rows() {
                        for (s, &v) in sum.iter_mut().zip(g.row(i)) {
                            *s = *s + v;
                        }
                    }
                    let mut d = val(row).clone();
                    d.requires_grad = false;
                    d.data_mut().copy_from_slice(&sum);
                    acc(grads, row, d);
                }
            }
            Op::Scale(a, s) => {
                if needs(a) {
                    let sv = T::of_f64(s);
                    acc(grads, a, g.map(|x| x * sv));
                }
            }
            Op::AddScalar(a) => {
                if needs(a) {
                    acc(grads, a, g.clone());
                }
            }
            Op::MatMul(a, b) => {
                if needs(a) {
                    acc(grads, a, g.matmul(&val(b).transpose())?);
                }
                if needs(b) {
                    acc(grads, b, val(a).transpose().matmul(g)?);
                }
            }
            Op::Transpose(a) => {
                if needs(a) {
                    acc(grads, a, g.transpose());
                }
            }
            Op::Exp(a) => {
                if needs(a) {
                    acc(grads, a, g.zip_map(val(id), |x, y| x * y)?);
                }
            }
            Op::Ln(a) => {
                if needs(a) {
                    acc(grads, a, g.zip_map(val(a), |x, y| x / y)?);
                }
            }
            Op::Tanh(a) => {
                if needs(a) {
                    acc(grads, a, g.zip_map(val(id), |x, y| x * (T::one() - y * y))?);
                }
            }
            Op::Gelu(a) => {
                if needs(a) {
                    acc(grads, a, g.zip_map(val(a), |x, y| x * gelu_deriv(y))?);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if needs(a) {
                    let (l, h) = (T::of_f64(lo), T::of_f64(hi));
                    acc(
                        grads,
                        a,
                        g.zip_map(val(a), |x, y| if y > l && y < h { x } else { T::zero() })?,
                    );
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(a) {
                    let y = val(id);
                    let (r, c) = (y.rows(), y.cols());
                    let mut d = y.clone();
                    d.requires_grad = false;
                    for i in 0..r {
                        let dot: T = g.row(i).iter().zip(y.row(i)).map(|(&gv, &yv)| gv * yv).sum();
                        let drow = &mut d.data_mut()[i * c..(i + 1) * c];
                        for (j, dv) in drow.iter_mut().enumerate() {
                            let yv = y.data()[i * c + j];
                            *dv = yv * (g.data()[i * c + j] - dot);
                        }
                    }
                    acc(grads, a, d);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = val(x);
                let (r, c) = (xv.rows(), xv.cols());
                let cn = T::from_usize(c).unwrap();
                let epsv = T::of_f64(eps);
                let gv = val(gamma);
                let mut dx = if needs(x) { Some(xv.map(|_| T::zero())) } else { None };
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..r {
                    let row = xv.row(i);
                    let mean = row.iter().copied().sum::<T>() / cn;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
                    let inv = (var + epsv).sqrt().recip();
                    let grow = g.row(i);
                    // x_hat per element, reused for all three grads
                    let mut m1 = T::zero(); // mean of dxhat
                    let mut m2 = T::zero(); // mean of dxhat * xhat
                    let mut xhat = vec![T::zero(); c];
                    let mut dxhat = vec![T::zero(); c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = grow[j] * gv.data()[j];
                        m1 = m1 + dxhat[j];
                        m2 = m2 + dxhat[j] * xhat[j];
                        dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    m1 = m1 / cn;
                    m2 = m2 / cn;
                    if let Some(dx) = dx.as_mut() {
                        let drow = &mut dx.data_mut()[i * c..(i + 1) * c];
                        for j in 0..c {
                            drow[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(grads, x, dx);
                }
                if needs(gamma) {
                    let mut d = val(gamma).clone();
                    d.requires_grad = false;
                    d.data_mut().copy_from_slice(&dgamma);
                    acc(grads, gamma, d);
                }
                if needs(beta) {
                    let mut d = val(beta).clone();
                    d.requires_grad = false;
                    d.data_mut().copy_from_slice(&dbeta);
                    acc(grads, beta, d);
                }
            }
            Op::NormalizeRows(a, eps) => {
                if needs(a) {
                    let xv = val(a);
                    let y = val(id);
                    let (r, c) = (xv.rows(), xv.cols());
                    let epsv = T::of_f64(eps);
                    let mut d = xv.map(|_| T::zero());
                    for i in 0..r {
                        let norm = xv.row(i).iter().map(|&v| v * v).sum::<T>().sqrt().max(epsv);
                        let dot: T = g.row(i).iter().zip(y.row(i)).map(|(&gv, &yv)| gv * yv).sum();
                        let drow = &mut d.data_mut()[i * c..(i + 1) * c];
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(g.row(i)).zip(y.row(i)) {
                            *dv = (gv - yv * dot) / norm;
                        }
                    }
                    acc(grads, a, d);
                }
            }
            Op::Sum(a) => {
                if needs(a) {
                    let s = g.item();
                    acc(grads, a, val(a).map(|_| s));
                }
            }
            Op::Mean(a) => {
                if needs(a) {
                    let s = g.item() / T::from_usize(val(a).numel()).unwrap();
                    acc(grads, a, val(a).map(|_| s));
                }
            }
            Op::MeanRows(a) => {
                if needs(a) {
                    let av = val(a);
                    let (r, c) = (av.rows(), av.cols());
                    let rn = T::from_usize(r).unwrap();
                    let mut d = av.map(|_| T::zero());
                    for i in 0..r {
                        let drow = &mut d.data_mut()[i * c..(i + 1) * c];
                        for (dv, &gv) in drow.iter_mut().zip(g.data()) {
                            *dv = gv / rn;
                        }
                    }
                    acc(grads, a, d);
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = val(a).rows();
                let c = g.cols();
                if needs(a) {
                    let d = TensorG::from_vec(
                        val(a).dims().to_vec(),
                        g.data()[..ra * c].to_vec(),
                    )?;
                    acc(grads, a, d);
                }
                if needs(b) {
                    let d = TensorG::from_vec(
                        val(b).dims().to_vec(),
                        g.data()[ra * c..].to_vec(),
                    )?;
                    acc(grads, b, d);
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = (val(a).rows(), val(a).cols());
                let cb = val(b).cols();
                if needs(a) {
                    let mut data = Vec::with_capacity(r * ca);
                    for i in 0..r {
                        data.extend_from_slice(&g.row(i)[..ca]);
                    }
                    acc(grads, a, TensorG::from_vec(val(a).dims().to_vec(), data)?);
                }
                if needs(b) {
                    let mut data = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        data.extend_from_slice(&g.row(i)[ca..]);
                    }
                    acc(grads, b, TensorG::from_vec(val(b).dims().to_vec(), data)?);
                }
            }
            Op::SliceRows(a, start, _end) => {
                if needs(a) {
                    let mut d = val(a).map(|_| T::zero());
                    let c = d.cols();
                    d.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    acc(grads, a, d);
                }
            }
            Op::SliceCols(a, start, end) => {
                if needs(a) {
                    let mut d = val(a).map(|_| T::zero());
                    let (r, c) = (d.rows(), d.cols());
                    let w = end - start;
                    for i in 0..r {
                        d.data_mut()[i * c + start..i * c + end]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    acc(grads, a, d);
                }
            }
        }
        Ok(())
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::of_f64(0.044715);
    let half = T::of_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_deriv<T: Scalar>(x: T) -> T {
    let c = T::of_f64(0.797_884_560_802_865_4);
    let k = T::of_f64(0.044715);
    let half = T::of_f64(0.5);
    let three = T::of_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Gradient table produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    by_node: Vec<Option<TensorG<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Value) -> Option<&TensorG<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter leaf; parameters the loss never touched get
    /// zeros of the parameter's shape.
    pub fn for_param(&self, graph: &Graph<T>, v: Value) -> TensorG<T> {
        match self.get(v) {
            Some(g) => {
                let mut g = g.clone();
                g.requires_grad = false;
                g
            }
            None => TensorG::zeros(graph.value(v).dims()),
        }
    }
}
