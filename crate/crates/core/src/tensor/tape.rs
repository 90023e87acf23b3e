use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
}

const EXP_CLAMP: f64 = 60.0;

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

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.clamp(-EXP_CLAMP, EXP_CLAMP).exp(),
            Unary::Log => x.ln(),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Exp => {
                if x.abs() <= EXP_CLAMP {
                    y
                } else {
                    0.0
                }
            }
            Unary::Log => 1.0 / x,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MulConst(usize, Vec<f64>),
    Unary(usize, Unary),
    ClampMax(usize, f64),
    Sum(usize),
    Mean {
        input: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Reshape(usize),
    ConcatCols(Vec<usize>),
    SliceCols {
        input: usize,
        start: usize,
    },
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    CosineRows {
        input: usize,
        other: Vec<f64>,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        bias: usize,
        geom: ConvGeom,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Norm floor used by cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Records primitive operations in execution order; nodes only ever refer to
/// earlier nodes, so the node list is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, keyed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf carrying the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, t.requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(Tensor::scalar(x), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ((m, k), (k2, n)) = match (rows_cols(sa), rows_cols(sb)) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        kernels::mm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ((m, k), (n, _)) = match (rows_cols(sa), rows_cols(sb)) {
            (Some(x), Some(y)) if x.1 == y.1 => (x, y),
            _ => return Err(Error::dim("matmul_nt", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        kernels::mm_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a.0, b.0), rg))
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(sa.to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    /// `a[m×n] + row[n]`, broadcasting `row` over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let (m, n) = match rows_cols(sa) {
            Some((m, n)) if self.value(row).len() == n => (m, n),
            _ => return Err(Error::dim("add_row", sa, sr)),
        };
        let r = self.data(row);
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(a.0, row.0), rg))
    }

    /// `a[m×n] ⊙ col[m]`, scaling row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        let (m, n) = match rows_cols(sa) {
            Some((m, n)) if self.value(col).len() == m => (m, n),
            _ => return Err(Error::dim("mul_col", sa, sc)),
        };
        let c = self.data(col);
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n].iter_mut().for_each(|o| *o *= c[i]);
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MulCol(a.0, col.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a.0, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x + c).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Offset(a.0), rg)
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if t.len() != c.len() {
            return Err(Error::dim("mul_const", t.shape(), &[c.len()]));
        }
        let data = t.data().iter().zip(c).map(|(x, y)| x * y).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst(a.0, c.to_vec()), rg))
    }

    pub fn map_unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let t = self.value(a);
        if kind == Unary::Log {
            if let Some(i) = t.data().iter().position(|&x| !(x > 0.0)) {
                return Err(Error::domain(
                    "log",
                    format!("non-positive entry {} at index {i}", t.data()[i]),
                ));
            }
        }
        let data = t.data().iter().map(|&x| kind.apply(x)).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Unary(a.0, kind), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, Unary::Relu).expect("total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, Unary::Sigmoid).expect("total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, Unary::Tanh).expect("total")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map_unary(a, Unary::Softplus).expect("total")
    }

    /// `min(a, max)` elementwise; gradient is cut where the clamp is active.
    pub fn clamp_max(&mut self, a: Var, max: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.min(max)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::ClampMax(a.0, max), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    /// Arithmetic mean over all entries (`axis = None`) or along one axis.
    pub fn reduce_mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::domain("reduce_mean", "empty tensor"));
        }
        let shape = t.shape().to_vec();
        let (outer, axis_len, inner, out_shape) = match axis {
            None => (1, t.len(), 1, vec![]),
            Some(ax) if ax < shape.len() => {
                let outer = shape[..ax].iter().product();
                let inner = shape[ax + 1..].iter().product();
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                (outer, shape[ax], inner, out_shape)
            }
            Some(ax) => {
                return Err(Error::domain(
                    "reduce_mean",
                    format!("axis {ax} out of range for shape {shape:?}"),
                ))
            }
        };
        let x = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a_i in 0..axis_len {
                let base = (o * axis_len + a_i) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let inv = 1.0 / axis_len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Mean {
                input: a.0,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    /// Concatenates 2-D values with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::domain("concat_cols", "no inputs"))?;
        let rows = rows_cols(self.shape(*first))
            .ok_or_else(|| Error::dim("concat_cols", self.shape(*first), &[0, 0]))?
            .0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            match rows_cols(self.shape(*p)) {
                Some((r, c)) if r == rows => widths.push(c),
                _ => return Err(Error::dim("concat_cols", self.shape(*first), self.shape(*p))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(*p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = match rows_cols(self.shape(a)) {
            Some((m, n)) if start + len <= n => (m, n),
            _ => return Err(Error::dim("slice_cols", self.shape(a), &[start, len])),
        };
        let x = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![m, len], out)?,
            Op::SliceCols { input: a.0, start },
            rg,
        ))
    }

    fn row_lse(row: &[f64]) -> f64 {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    }

    /// Row-wise softmax, computed as `exp(x - logsumexp(x))`.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a)).ok_or_else(|| Error::dim("softmax_rows", self.shape(a), &[0, 0]))?;
        if n == 0 {
            return Err(Error::domain("softmax_rows", "zero columns"));
        }
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let lse = Self::row_lse(row);
            for j in 0..n {
                out[i * n + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows(a.0), rg))
    }

    /// Stable `log Σ_j exp(a[i, j])` per row; output shape `[m]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a)).ok_or_else(|| Error::dim("logsumexp_rows", self.shape(a), &[0, 0]))?;
        if n == 0 {
            return Err(Error::domain("logsumexp_rows", "zero columns"));
        }
        let x = self.data(a);
        let out = (0..m).map(|i| Self::row_lse(&x[i * n..(i + 1) * n])).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m], out)?, Op::LogSumExpRows(a.0), rg))
    }

    /// Cosine similarity of each row of `a[m×n]` with the matching row of the
    /// constant `other[m×n]`; output `[m]`. Norms are floored at [`COSINE_EPS`].
    pub fn cosine_rows(&mut self, a: Var, other: &[f64]) -> Result<Var> {
        let (m, n) = match rows_cols(self.shape(a)) {
            Some((m, n)) if other.len() == m * n => (m, n),
            _ => return Err(Error::dim("cosine_rows", self.shape(a), &[other.len()])),
        };
        let x = self.data(a);
        let out = (0..m)
            .map(|i| {
                let (r, c) = (&x[i * n..(i + 1) * n], &other[i * n..(i + 1) * n]);
                let dot: f64 = r.iter().zip(c).map(|(p, q)| p * q).sum();
                let na = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_EPS);
                let nb = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_EPS);
                dot / (na * nb)
            })
            .collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![m], out)?,
            Op::CosineRows {
                input: a.0,
                other: other.to_vec(),
            },
            rg,
        ))
    }

    /// Valid, stride-1 convolution. `x: [B, H, W, C]`, `kernel: [kh, kw, C, O]`,
    /// `bias: [O]` → `[B, H-kh+1, W-kw+1, O]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        let (b, h, w, c) = match sx[..] {
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(Error::dim("conv2d", &sx, &sk)),
        };
        let (kh, kw, o) = match sk[..] {
            [kh, kw, kc, o] if kc == c => (kh, kw, o),
            _ => return Err(Error::dim("conv2d", &sx, &sk)),
        };
        if kh > h || kw > w || kh == 0 || kw == 0 {
            return Err(Error::dim("conv2d", &sx, &sk));
        }
        if self.value(bias).len() != o {
            return Err(Error::dim("conv2d bias", &sk, self.shape(bias)));
        }
        let geom = ConvGeom { batch: b, h, w, c, kh, kw };
        let cols = kernels::im2col(self.data(x), geom);
        let rows = geom.rows();
        let mut out = vec![0.0; rows * o];
        let bv = self.data(bias);
        for r in 0..rows {
            out[r * o..(r + 1) * o].copy_from_slice(bv);
        }
        kernels::mm_acc(&cols, self.data(kernel), &mut out, rows, geom.patch_len(), o);
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![b, geom.out_h(), geom.out_w(), o], out)?,
            Op::Conv2d {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
                geom,
            },
            rg,
        ))
    }

    /// Non-overlapping `stride×stride` max pooling over `[B, H, W, C]`.
    pub fn maxpool(&mut self, x: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (b, h, w, c) = match sx[..] {
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(Error::dim("maxpool", &sx, &[stride])),
        };
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Config(format!(
                "maxpool stride {stride} does not divide spatial dims {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool(self.data(x), b, h, w, c, stride);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, h / stride, w / stride, c], out)?,
            Op::MaxPool { input: x.0, argmax },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients of every
    /// trainable leaf reachable from it; repeated uses accumulate by sum.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |i: usize| nodes[i].value.data();
        let wants = |i: usize| nodes[i].requires_grad;
        macro_rules! acc {
            ($i:expr) => {
                slot(grads, $i, nodes[$i].value.len())
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(nodes[*a].value.shape()).unwrap();
                let n = nodes[*b].value.shape()[1];
                if wants(*a) {
                    kernels::mm_nt_acc(g, val(*b), acc!(*a), m, n, k);
                }
                if wants(*b) {
                    kernels::mm_tn_acc(val(*a), g, acc!(*b), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = rows_cols(nodes[*a].value.shape()).unwrap();
                let n = nodes[*b].value.shape()[0];
                if wants(*a) {
                    kernels::mm_acc(g, val(*b), acc!(*a), m, n, k);
                }
                if wants(*b) {
                    kernels::mm_tn_acc(g, val(*a), acc!(*b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for (i, s) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(i) {
                        acc!(i).iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (i, s) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(i) {
                        acc!(i).iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b);
                    acc!(*a).iter_mut().zip(g.iter().zip(other)).for_each(|(d, (x, y))| *d += x * y);
                }
                if wants(*b) {
                    let other = val(*a);
                    acc!(*b).iter_mut().zip(g.iter().zip(other)).for_each(|(d, (x, y))| *d += x * y);
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if wants(*row) {
                    let n = nodes[*row].value.len();
                    let d = acc!(*row);
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::MulCol(a, col) => {
                let m = nodes[*col].value.len();
                let n = g.len() / m;
                if wants(*a) {
                    let c = val(*col);
                    let d = acc!(*a);
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[i * n + j] * c[i];
                        }
                    }
                }
                if wants(*col) {
                    let x = val(*a);
                    let d = acc!(*col);
                    for i in 0..m {
                        d[i] += (0..n).map(|j| g[i * n + j] * x[i * n + j]).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::MulConst(a, c) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g.iter().zip(c)).for_each(|(d, (x, y))| *d += x * y);
                }
            }
            Op::Unary(a, kind) => {
                if wants(*a) {
                    let x = val(*a);
                    let y = node.value.data();
                    let d = acc!(*a);
                    for i in 0..g.len() {
                        d[i] += g[i] * kind.derivative(x[i], y[i]);
                    }
                }
            }
            Op::ClampMax(a, max) => {
                if wants(*a) {
                    let x = val(*a);
                    let d = acc!(*a);
                    for i in 0..g.len() {
                        if x[i] <= *max {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    acc!(*a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean {
                input,
                outer,
                axis_len,
                inner,
            } => {
                if wants(*input) {
                    let inv = 1.0 / *axis_len as f64;
                    let d = acc!(*input);
                    for o in 0..*outer {
                        for a_i in 0..*axis_len {
                            let base = (o * axis_len + a_i) * inner;
                            for i in 0..*inner {
                                d[base + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.shape()[1];
                    if wants(p) {
                        let d = acc!(p);
                        for i in 0..rows {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { input, start } => {
                if wants(*input) {
                    let (m, n) = rows_cols(nodes[*input].value.shape()).unwrap();
                    let len = node.value.shape()[1];
                    let d = acc!(*input);
                    for i in 0..m {
                        for j in 0..len {
                            d[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let (m, n) = rows_cols(node.value.shape()).unwrap();
                    let y = node.value.data();
                    let d = acc!(*a);
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dotp: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(p, q)| p * q).sum();
                        for j in r {
                            d[j] += y[j] * (g[j] - dotp);
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                if wants(*a) {
                    let (m, n) = rows_cols(nodes[*a].value.shape()).unwrap();
                    let x = val(*a);
                    let lse = node.value.data();
                    let d = acc!(*a);
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[i] * (x[i * n + j] - lse[i]).exp();
                        }
                    }
                }
            }
            Op::CosineRows { input, other } => {
                if wants(*input) {
                    let (m, n) = rows_cols(nodes[*input].value.shape()).unwrap();
                    let x = val(*input);
                    let d = acc!(*input);
                    for i in 0..m {
                        let (r, c) = (&x[i * n..(i + 1) * n], &other[i * n..(i + 1) * n]);
                        let raw_a = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let na = raw_a.max(COSINE_EPS);
                        let nb = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_EPS);
                        let dotp: f64 = r.iter().zip(c).map(|(p, q)| p * q).sum();
                        let floored = raw_a < COSINE_EPS;
                        for j in 0..n {
                            let mut gj = c[j] / (na * nb);
                            if !floored {
                                gj -= dotp * r[j] / (na * na * na * nb);
                            }
                            d[i * n + j] += g[i] * gj;
                        }
                    }
                }
            }
            Op::Conv2d { x, kernel, bias, geom } => {
                let o = nodes[*kernel].value.shape()[3];
                let rows = geom.rows();
                let q = geom.patch_len();
                if wants(*bias) {
                    let d = acc!(*bias);
                    for r in 0..rows {
                        d.iter_mut().zip(&g[r * o..(r + 1) * o]).for_each(|(d, x)| *d += x);
                    }
                }
                if wants(*kernel) {
                    let cols = kernels::im2col(val(*x), *geom);
                    kernels::mm_tn_acc(&cols, g, acc!(*kernel), rows, q, o);
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; rows * q];
                    kernels::mm_nt_acc(g, val(*kernel), &mut dcols, rows, o, q);
                    kernels::col2im_acc(&dcols, *geom, acc!(*x));
                }
            }
            Op::MaxPool { input, argmax } => {
                if wants(*input) {
                    let d = acc!(*input);
                    for (gi, &src) in g.iter().zip(argmax) {
                        d[src] += gi;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i2 = t.leaf(&Tensor::eye(2));
        let p = t.matmul(a, i2).unwrap();
        assert_eq!(t.data(p), &[1.0, 2.0, 3.0, 4.0]);

        let col = t.leaf(&Tensor::matrix(&[&[5.0], &[7.0]]));
        let p = t.matmul(i2, col).unwrap();
        assert_eq!(t.data(p), &[5.0, 7.0]);

        let r = t.leaf(&Tensor::matrix(&[&[1.0, 2.0]]));
        let c = t.leaf(&Tensor::matrix(&[&[3.0], &[4.0]]));
        let p = t.matmul(r, c).unwrap();
        assert_eq!(t.data(p), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::zeros(&[2, 3]));
        let b = t.leaf(&Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn unary_examples() {
        let mut t = Tape::new();
        let z = t.leaf(&Tensor::vector(vec![0.0]));
        let s = t.sigmoid(z);
        let th = t.tanh(z);
        let sp = t.softplus(z);
        assert_eq!(t.item(s), 0.5);
        assert_eq!(t.item(th), 0.0);
        assert!(approx(t.item(sp), std::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn log_rejects_non_positive_with_index() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::vector(vec![1.0, 2.0, 0.0]));
        let err = t.map_unary(x, Unary::Log).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
        assert!(err.to_string().contains("index 2"), "{err}");
    }

    #[test]
    fn stable_activations_at_extremes() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::vector(vec![1000.0]));
        let e = t.map_unary(x, Unary::Exp).unwrap();
        assert!(t.item(e).is_finite());
        assert_eq!(t.item(e), 60f64.exp());
    }

    #[test]
    fn mean_examples() {
        let mut t = Tape::new();
        let v = t.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let m = t.reduce_mean(v, None).unwrap();
        assert_eq!(t.item(m), 2.0);

        let a = t.leaf(&Tensor::matrix(&[&[1.0, 3.0], &[5.0, 7.0]]));
        let m0 = t.reduce_mean(a, Some(0)).unwrap();
        assert_eq!(t.data(m0), &[3.0, 5.0]);
        assert_eq!(t.shape(m0), &[2]);

        let c = t.leaf(&Tensor::vector(vec![-4.25]));
        let mc = t.reduce_mean(c, None).unwrap();
        assert_eq!(t.item(mc), -4.25);

        let e = t.leaf(&Tensor::vector(vec![]));
        assert!(matches!(t.reduce_mean(e, None), Err(Error::Domain { .. })));
        assert!(t.reduce_mean(a, Some(2)).is_err());
    }

    #[test]
    fn power_rule_and_accumulation() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::scalar(3.0));
        let sq = t.mul(x, x).unwrap();
        let g = t.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);

        let mut t = Tape::new();
        let x = t.param(&Tensor::vector(vec![1.0, 1.0]));
        let xx = t.add(x, x).unwrap();
        let s = t.sum(xx);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let t = Tape::new();
        assert!(matches!(t.backward(Var(0)), Err(Error::Contract(_))));
        let mut t = Tape::new();
        let x = t.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn two_forwards_on_one_tape_do_not_interfere() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::scalar(2.0));
        let l1 = t.mul(x, x).unwrap();
        let l2t = t.scale(x, 5.0);
        let g1 = t.backward(l1).unwrap();
        let g2 = t.backward(l2t).unwrap();
        assert_eq!(g1.get(x).unwrap(), &[4.0]);
        assert_eq!(g2.get(x).unwrap(), &[5.0]);
        let g1_again = t.backward(l1).unwrap();
        assert_eq!(g1_again.get(x).unwrap(), &[4.0]);
    }

    #[test]
    fn maxpool_routes_ties_to_first_entry() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::new(vec![1, 2, 2, 1], vec![4.0; 4]).unwrap());
        let p = t.maxpool(x, 2).unwrap();
        assert_eq!(t.data(p), &[4.0]);
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_indivisible_dims() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::zeros(&[1, 3, 4, 1]));
        assert!(matches!(t.maxpool(x, 2), Err(Error::Config(_))));
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::zeros(&[1, 2, 2, 1]));
        let k = t.leaf(&Tensor::zeros(&[3, 3, 1, 1]));
        let b = t.leaf(&Tensor::zeros(&[1]));
        assert!(matches!(t.conv2d(x, k, b), Err(Error::Dimension { .. })));
    }
}
