//! Dense-matrix reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! row-major `f64` matrices; a [`Var`] is a handle into the tape. Calling
//! [`Tape::backward`] on a 1×1 result propagates exact gradients to every
//! node that transitively depends on a trainable leaf.
//!
//! Learnable weights live in a [`ParamStore`] outside the tape. A forward
//! pass binds the store onto the tape (as trainable leaves or as
//! constants), and [`ParamStore::accumulate_grads`] copies leaf gradients
//! back after `backward`.

mod optim;
mod params;

pub use optim::Adam;
pub use params::{Bound, Checkpoint, Param, ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use thiserror::Error;

pub type Matrix = Array2<f64>;

/// `sqrt(2/pi)`, used by the tanh approximation of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;
const NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("parameter `{0}` is missing")]
    MissingParam(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    RowSum(Var),
    ColSum(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    Gelu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Dropout(Var, Matrix),
    LayerNormRows(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    Log(Var),
    Exp(Var),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch { op, lhs: a.dim(), rhs: b.dim() })
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, value: Matrix, input: Var, op: Op) -> Var {
        let rg = self.nodes[input.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, value: Matrix, a: Var, b: Var, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    /// A trainable leaf; its gradient is readable through [`Tape::grad`].
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Gradient accumulated by the last `backward` call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: av.dim(), rhs: bv.dim() });
        }
        let out = av.dot(bv);
        Ok(self.binary(out, a, b, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        Ok(self.binary(out, a, b, Op::Add(a, b)))
    }

    /// Adds a 1×c row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(TensorError::ShapeMismatch { op: "add_row", lhs: av.dim(), rhs: rv.dim() });
        }
        let out = av + rv;
        Ok(self.binary(out, a, row, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        Ok(self.binary(out, a, b, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("hadamard", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        Ok(self.binary(out, a, b, Op::Hadamard(a, b)))
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is r×1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.ncols() != 1 || cv.nrows() != av.nrows() {
            return Err(TensorError::ShapeMismatch { op: "mul_col", lhs: av.dim(), rhs: cv.dim() });
        }
        let out = av * cv;
        Ok(self.binary(out, a, col, Op::MulCol(a, col)))
    }

    /// Multiplies every entry of `a` by the 1×1 node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.dim() != (1, 1) {
            return Err(TensorError::ShapeMismatch { op: "mul_scalar", lhs: self.shape(a), rhs: sv.dim() });
        }
        let out = self.value(a) * sv[[0, 0]];
        Ok(self.binary(out, a, s, Op::MulScalar(a, s)))
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.unary(out, a, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        self.unary(out, a, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scalar_mul(a, -1.0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]),
                    rhs: self.shape(p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("rows checked");
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.unary(out, a, Op::Transpose(a))
    }

    /// Sum of each row: r×c → r×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(out, a, Op::RowSum(a))
    }

    /// Sum over rows: r×c → 1×c.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(out, a, Op::ColSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).sum());
        self.unary(out, a, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.len().max(1) as f64;
        let out = Matrix::from_elem((1, 1), v.sum() / n);
        self.unary(out, a, Op::Mean(a))
    }

    /// Row `k` of the result is row `index[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let len = v.nrows();
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return Err(TensorError::IndexOutOfRange { index: bad, len });
        }
        let out = v.select(Axis(0), index);
        Ok(self.unary(out, a, Op::GatherRows(a, index.to_vec())))
    }

    /// Sums rows of `a` into `segments` buckets: row `k` goes to `seg[k]`.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let v = self.value(a);
        if seg.len() != v.nrows() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_sum",
                lhs: v.dim(),
                rhs: (seg.len(), 1),
            });
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= segments) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: segments });
        }
        let mut out = Matrix::zeros((segments, v.ncols()));
        for (k, &s) in seg.iter().enumerate() {
            let mut dst = out.row_mut(s);
            dst += &v.row(k);
        }
        Ok(self.unary(out, a, Op::SegmentSum(a, seg.to_vec())))
    }

    /// Softmax of an r×1 column taken separately within each segment.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let v = self.value(a);
        if v.ncols() != 1 || seg.len() != v.nrows() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                lhs: v.dim(),
                rhs: (seg.len(), 1),
            });
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= segments) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: segments });
        }
        let mut max = vec![f64::NEG_INFINITY; segments];
        for (k, &s) in seg.iter().enumerate() {
            max[s] = max[s].max(v[[k, 0]]);
        }
        let mut out = Matrix::zeros(v.dim());
        let mut total = vec![0.0; segments];
        for (k, &s) in seg.iter().enumerate() {
            let e = (v[[k, 0]] - max[s]).exp();
            out[[k, 0]] = e;
            total[s] += e;
        }
        for (k, &s) in seg.iter().enumerate() {
            out[[k, 0]] /= total[s];
        }
        Ok(self.unary(out, a, Op::SegmentSoftmax(a, seg.to_vec())))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.unary(out, a, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.unary(out, a, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        self.unary(out, a, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row -= lse;
        }
        self.unary(out, a, Op::LogSoftmaxRows(a))
    }

    /// Inverted dropout. Identity when `train` is false or `p` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Var {
        if !train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let mask = self.value(a).mapv(|_| if rng.gen::<f64>() < p { 0.0 } else { keep });
        let out = self.value(a) * &mask;
        self.unary(out, a, Op::Dropout(a, mask))
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mu = row.sum() / n;
            row -= mu;
            let var = row.iter().map(|x| x * x).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            row *= inv;
            inv_std.push(inv);
        }
        self.unary(out, a, Op::LayerNormRows(a, inv_std))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_EPS);
            row /= norm;
            norms.push(norm);
        }
        self.unary(out, a, Op::L2NormalizeRows(a, norms))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.unary(out, a, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.unary(out, a, Op::Exp(a))
    }

    /// Forwards the value and blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Propagates d(loss)/d(node) to every node on a trainable path.
    /// Gradients from earlier calls on this tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, delta: Matrix| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if nodes[a.0].requires_grad {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if nodes[b.0].requires_grad {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Hadamard(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::MulCol(a, col) => {
                acc(*a, g * val(*col));
                acc(*col, (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::MulScalar(a, s) => {
                let k = val(*s)[[0, 0]];
                acc(*a, g * k);
                acc(*s, Matrix::from_elem((1, 1), (g * val(*a)).sum()));
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = val(*p).ncols();
                    acc(*p, g.slice(s![.., offset..offset + c]).to_owned());
                    offset += c;
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::RowSum(a) => {
                let shape = val(*a).dim();
                acc(*a, g.broadcast(shape).expect("r×1 broadcasts").to_owned());
            }
            Op::ColSum(a) => {
                let shape = val(*a).dim();
                acc(*a, g.broadcast(shape).expect("1×c broadcasts").to_owned());
            }
            Op::Sum(a) => acc(*a, Matrix::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                acc(*a, Matrix::from_elem(val(*a).dim(), g[[0, 0]] / n));
            }
            Op::GatherRows(a, index) => {
                let mut d = Matrix::zeros(val(*a).dim());
                for (k, &src) in index.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(k);
                }
                acc(*a, d);
            }
            Op::SegmentSum(a, seg) => acc(*a, g.select(Axis(0), seg)),
            Op::SegmentSoftmax(a, seg) => {
                let segments = seg.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; segments];
                for (k, &s) in seg.iter().enumerate() {
                    dot[s] += out[[k, 0]] * g[[k, 0]];
                }
                let mut d = Matrix::zeros(out.dim());
                for (k, &s) in seg.iter().enumerate() {
                    d[[k, 0]] = out[[k, 0]] * (g[[k, 0]] - dot[s]);
                }
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let mut d = val(*a).mapv(gelu_grad);
                d *= g;
                acc(*a, d);
            }
            Op::Relu(a) => {
                let mut d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                d *= g;
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &y| *dv = y * (*dv - dot));
                }
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let total = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &y| *dv -= y.exp() * total);
                }
                acc(*a, d);
            }
            Op::Dropout(a, mask) => acc(*a, g * mask),
            Op::LayerNormRows(a, inv_std) => {
                let mut d = g.clone();
                for ((mut drow, yrow), &inv) in d.rows_mut().into_iter().zip(out.rows()).zip(inv_std) {
                    let n = drow.len() as f64;
                    let mean_g = drow.sum() / n;
                    let mean_gy: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|dv, &y| *dv = inv * (*dv - mean_g - y * mean_gy));
                }
                acc(*a, d);
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut d = g.clone();
                for ((mut drow, yrow), &norm) in d.rows_mut().into_iter().zip(out.rows()).zip(norms) {
                    let dot: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|dv, &y| *dv = (*dv - y * dot) / norm);
                }
                acc(*a, d);
            }
            Op::Log(a) => acc(*a, g / val(*a)),
            Op::Exp(a) => acc(*a, g * out),
        }
    }
}
