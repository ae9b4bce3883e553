//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape of operations built during one forward pass;
//! [`Graph::backward`] walks it in reverse and accumulates gradients for
//! every node. The op set is exactly what the segmentation pipeline needs:
//! matrix products, elementwise maps, row softmaxes, gathers, layer norm,
//! neighborhood pooling, and the Fourier coordinate encoder.
//!
//! Discrete choices made during a forward pass (attention masks, matched
//! targets, sampled voxel sets) enter the tape as constants, so the gradient
//! is the exact gradient of the piecewise-smooth loss on the current piece.

use std::rc::Rc;

use crate::encoding::FourierSpec;
use crate::linalg::Matrix;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub enum Unary {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Sigmoid,
    Softplus,
    Gelu,
    Abs,
    Clamp01,
    Neg,
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    /// a * b^T
    MatmulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// [m,n] + broadcast [1,n]
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Sum(Var),
    SumCols(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    /// out[i,0] = a[i, idx[i]]
    SelectPerRow(Var, Rc<Vec<usize>>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    /// out[i] = mean_{j in nbrs[i]} a[j]; neighbor lists must be nonempty.
    NeighborMean(Var, Rc<Vec<Vec<usize>>>),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    /// out[i,0] = ||a_row_i||_2
    RowNorm(Var),
    FourierEnc(Var, FourierSpec),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    slots: Vec<Option<Matrix>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v` (zeros if the loss does not
    /// depend on it).
    pub fn get(&self, v: Var, shape_like: &Matrix) -> Matrix {
        match &self.slots[v.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(shape_like.rows(), shape_like.cols()),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Matrix> {
        self.slots[v.0].as_ref()
    }
}

/// Operation tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant or parameter entry point.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::Matmul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatmulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, n), "add_row shape");
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..m {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Var {
        let v = self.value(a).map(|x| unary_forward(x, u));
        self.push(v, Op::Unary(a, u))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Clamp01)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a).rows();
        let mut v = Matrix::zeros(m, 1);
        for i in 0..m {
            v.set(i, 0, self.value(a).row(i).iter().sum());
        }
        self.push(v, Op::SumCols(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s / n as f64), Op::Mean(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows_value(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..x.rows() {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            for (o, &z) in v.row_mut(i).iter_mut().zip(row) {
                *o = z - lse;
            }
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let mut v = Matrix::zeros(idx.len(), src.cols());
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(src.row(i));
        }
        self.push(v, Op::GatherRows(a, Rc::new(idx.to_vec())))
    }

    pub fn select_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows(), idx.len(), "select_per_row index length");
        let mut v = Matrix::zeros(idx.len(), 1);
        for (r, &c) in idx.iter().enumerate() {
            v.set(r, 0, src.get(r, c));
        }
        self.push(v, Op::SelectPerRow(a, Rc::new(idx.to_vec())))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (xa, xb) = (self.value(a), self.value(b));
        assert_eq!(xa.rows(), xb.rows(), "concat_cols rows");
        let mut v = Matrix::zeros(xa.rows(), xa.cols() + xb.cols());
        for i in 0..xa.rows() {
            v.row_mut(i)[..xa.cols()].copy_from_slice(xa.row(i));
            v.row_mut(i)[xa.cols()..].copy_from_slice(xb.row(i));
        }
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut v = Matrix::zeros(x.rows(), len);
        for i in 0..x.rows() {
            v.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn neighbor_mean(&mut self, a: Var, nbrs: Rc<Vec<Vec<usize>>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), nbrs.len(), "neighbor_mean rows");
        let mut v = Matrix::zeros(x.rows(), x.cols());
        for (i, list) in nbrs.iter().enumerate() {
            assert!(!list.is_empty(), "empty neighbor list");
            let inv = 1.0 / list.len() as f64;
            for &j in list {
                for (o, &s) in v.row_mut(i).iter_mut().zip(x.row(j)) {
                    *o += s;
                }
            }
            for o in v.row_mut(i) {
                *o *= inv;
            }
        }
        self.push(v, Op::NeighborMean(a, nbrs))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        assert_eq!(self.value(gamma).shape(), (1, n), "layer_norm gamma");
        assert_eq!(self.value(beta).shape(), (1, n), "layer_norm beta");
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut v = Matrix::zeros(xv.rows(), n);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&z| (z - mu) * (z - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, o) in v.row_mut(i).iter_mut().enumerate() {
                *o = g[j] * (row[j] - mu) * inv + b[j];
            }
        }
        self.push(v, Op::LayerNormRows { x, gamma, beta, eps })
    }

    pub fn row_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Matrix::zeros(x.rows(), 1);
        for i in 0..x.rows() {
            v.set(i, 0, x.row(i).iter().map(|&z| z * z).sum::<f64>().sqrt());
        }
        self.push(v, Op::RowNorm(a))
    }

    pub fn fourier_enc(&mut self, coords: Var, spec: FourierSpec) -> Var {
        let v = spec.encode_unchecked(self.value(coords));
        self.push(v, Op::FourierEnc(coords, spec))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward needs a scalar loss"
        );
        let mut slots: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = slots[id].take() else { continue };
            self.accumulate(id, &g, &mut slots);
            slots[id] = Some(g);
        }
        Grads { slots }
    }

    fn accumulate(&self, id: usize, g: &Matrix, slots: &mut [Option<Matrix>]) {
        fn bump(slots: &mut [Option<Matrix>], v: Var, delta: Matrix) {
            match &mut slots[v.0] {
                Some(acc) => acc.axpy(1.0, &delta),
                slot @ None => *slot = Some(delta),
            }
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                bump(slots, *a, g.matmul_nt(self.value(*b)));
                bump(slots, *b, self.value(*a).matmul_tn(g));
            }
            Op::MatmulNt(a, b) => {
                bump(slots, *a, g.matmul(self.value(*b)));
                bump(slots, *b, g.matmul_tn(self.value(*a)));
            }
            Op::Add(a, b) => {
                bump(slots, *a, g.clone());
                bump(slots, *b, g.clone());
            }
            Op::Sub(a, b) => {
                bump(slots, *a, g.clone());
                bump(slots, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                bump(slots, *a, g.zip_map(self.value(*b), |gz, bz| gz * bz));
                bump(slots, *b, g.zip_map(self.value(*a), |gz, az| gz * az));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                bump(slots, *a, g.zip_map(bv, |gz, bz| gz / bz));
                let av = self.value(*a);
                let mut gb = g.zip_map(av, |gz, az| gz * az);
                gb = gb.zip_map(bv, |x, bz| -x / (bz * bz));
                bump(slots, *b, gb);
            }
            Op::AddRow(a, row) => {
                bump(slots, *a, g.clone());
                bump(slots, *row, g.col_sums());
            }
            Op::Scale(a, c) => bump(slots, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => bump(slots, *a, g.clone()),
            Op::Unary(a, u) => {
                let x = self.value(*a);
                let y = &self.nodes[id].value;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.len() {
                    d.data_mut()[i] =
                        g.data()[i] * unary_backward(x.data()[i], y.data()[i], *u);
                }
                bump(slots, *a, d);
            }
            Op::Sum(a) => {
                let s = g.as_scalar();
                let x = self.value(*a);
                bump(slots, *a, Matrix::from_fn(x.rows(), x.cols(), |_, _| s));
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let gi = g.get(i, 0);
                    for o in d.row_mut(i) {
                        *o = gi;
                    }
                }
                bump(slots, *a, d);
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let s = g.as_scalar() / x.len().max(1) as f64;
                bump(slots, *a, Matrix::from_fn(x.rows(), x.cols(), |_, _| s));
            }
            Op::SoftmaxRows(a) => {
                let s = &self.nodes[id].value;
                let mut d = Matrix::zeros(s.rows(), s.cols());
                for i in 0..s.rows() {
                    let srow = s.row(i);
                    let grow = g.row(i);
                    let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                    for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                        *o = srow[j] * (grow[j] - dot);
                    }
                }
                bump(slots, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let out = &self.nodes[id].value;
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let grow = g.row(i);
                    let gsum: f64 = grow.iter().sum();
                    for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                        *o = grow[j] - out.get(i, j).exp() * gsum;
                    }
                }
                bump(slots, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                bump(slots, *a, d);
            }
            Op::SelectPerRow(a, idx) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for (r, &c) in idx.iter().enumerate() {
                    d.set(r, c, d.get(r, c) + g.get(r, 0));
                }
                bump(slots, *a, d);
            }
            Op::ConcatCols(a, b) => {
                let (na, nb) = (self.value(*a).cols(), self.value(*b).cols());
                let mut da = Matrix::zeros(g.rows(), na);
                let mut db = Matrix::zeros(g.rows(), nb);
                for i in 0..g.rows() {
                    da.row_mut(i).copy_from_slice(&g.row(i)[..na]);
                    db.row_mut(i).copy_from_slice(&g.row(i)[na..]);
                }
                bump(slots, *a, da);
                bump(slots, *b, db);
            }
            Op::SliceCols(a, start, len) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    d.row_mut(i)[*start..*start + *len].copy_from_slice(g.row(i));
                }
                bump(slots, *a, d);
            }
            Op::NeighborMean(a, nbrs) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for (i, list) in nbrs.iter().enumerate() {
                    let inv = 1.0 / list.len() as f64;
                    for &j in list {
                        for (o, &gv) in d.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += gv * inv;
                        }
                    }
                }
                bump(slots, *a, d);
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let n = xv.cols();
                let mut dx = Matrix::zeros(xv.rows(), n);
                let mut dgamma = Matrix::zeros(1, n);
                let mut dbeta = Matrix::zeros(1, n);
                for i in 0..xv.rows() {
                    let row = xv.row(i);
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|&z| (z - mu) * (z - mu)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&z| (z - mu) * inv).collect();
                    let grow = g.row(i);
                    // d = dL/dxhat
                    let d: Vec<f64> = (0..n).map(|j| grow[j] * gv.get(0, j)).collect();
                    let mean_d = d.iter().sum::<f64>() / n as f64;
                    let mean_dxhat =
                        d.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx.set(i, j, inv * (d[j] - mean_d - xhat[j] * mean_dxhat));
                        dgamma.set(0, j, dgamma.get(0, j) + grow[j] * xhat[j]);
                        dbeta.set(0, j, dbeta.get(0, j) + grow[j]);
                    }
                }
                bump(slots, *x, dx);
                bump(slots, *gamma, dgamma);
                bump(slots, *beta, dbeta);
            }
            Op::RowNorm(a) => {
                let x = self.value(*a);
                let out = &self.nodes[id].value;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let norm = out.get(i, 0);
                    if norm > 0.0 {
                        let gi = g.get(i, 0) / norm;
                        for (o, &z) in d.row_mut(i).iter_mut().zip(x.row(i)) {
                            *o = gi * z;
                        }
                    }
                }
                bump(slots, *a, d);
            }
            Op::FourierEnc(a, spec) => {
                let x = self.value(*a);
                bump(slots, *a, spec.encode_backward(x, g));
            }
        }
    }
}

/// Numerically stable row softmax of a plain matrix.
pub fn softmax_rows_value(x: &Matrix) -> Matrix {
    let mut v = x.clone();
    for i in 0..x.rows() {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &z) in v.row_mut(i).iter_mut().zip(row) {
            *o = (z - m).exp();
            sum += *o;
        }
        for o in v.row_mut(i) {
            *o /= sum;
        }
    }
    v
}

fn unary_forward(x: f64, u: Unary) -> f64 {
    match u {
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Exp => x.exp(),
        Unary::Sqrt => x.sqrt(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Gelu => gelu(x),
        Unary::Abs => x.abs(),
        Unary::Clamp01 => x.clamp(0.0, 1.0),
        Unary::Neg => -x,
    }
}

fn unary_backward(x: f64, y: f64, u: Unary) -> f64 {
    match u {
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Exp => y,
        Unary::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Softplus => sigmoid(x),
        Unary::Gelu => gelu_deriv(x),
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Clamp01 => {
            if x > 0.0 && x < 1.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Neg => -1.0,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
