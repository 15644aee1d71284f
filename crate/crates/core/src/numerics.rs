//! Dense real-valued tensors and the handful of kernels the network needs.
//!
//! Everything is row-major `f64`. Vectors are `1 × n` tensors. Each
//! differentiable operation comes with an explicit backward function; the
//! higher layers compose these in recorded forward order instead of building
//! a dynamic graph.

use crate::error::{NmtError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NmtError::dim("tensor", (rows, cols), (data.len(), 1)));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// A `1 × n` row vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NmtError::dim("from_rows", (1, cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(NmtError::dim("add_assign", self.shape(), other.shape()));
        }
        axpy(1.0, &other.data, &mut self.data);
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unrolled dot product; four accumulators let the compiler vectorise.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = k * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += W · x` for `W: rows × cols`, `x: cols`, `out: rows`.
pub fn gemv_acc(w: &Tensor, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.cols, x.len());
    debug_assert_eq!(w.rows, out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(w.row(r), x);
    }
}

/// `dx += Wᵀ · dy`
pub fn gemv_t_acc(w: &Tensor, dy: &[f64], dx: &mut [f64]) {
    debug_assert_eq!(w.rows, dy.len());
    debug_assert_eq!(w.cols, dx.len());
    for (r, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            axpy(g, w.row(r), dx);
        }
    }
}

/// `grad += dy · xᵀ`
pub fn outer_acc(grad: &mut Tensor, dy: &[f64], x: &[f64]) {
    debug_assert_eq!(grad.rows, dy.len());
    debug_assert_eq!(grad.cols, x.len());
    for (r, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            axpy(g, x, grad.row_mut(r));
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(NmtError::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, b.row(k), orow);
            }
        }
    }
    Ok(out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let mut t = Tensor::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            t.data[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    t
}

/// Gradients of `C = A·B`: `(dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    if dc.shape() != (a.rows, b.cols) {
        return Err(NmtError::dim("matmul_backward", (a.rows, b.cols), dc.shape()));
    }
    let da = matmul(dc, &transpose(b))?;
    let db = matmul(&transpose(a), dc)?;
    Ok((da, db))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ewise {
    Tanh,
    Sigmoid,
    Add,
    Mul,
    Sub,
}

impl Ewise {
    pub fn is_binary(self) -> bool {
        matches!(self, Ewise::Add | Ewise::Mul | Ewise::Sub)
    }
}

pub fn ewise(kind: Ewise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut out = a.clone();
    match (kind, b) {
        (Ewise::Tanh, _) => out.data.iter_mut().for_each(|x| *x = x.tanh()),
        (Ewise::Sigmoid, _) => out.data.iter_mut().for_each(|x| *x = sigmoid(*x)),
        (_, None) => {
            return Err(NmtError::Argument(format!(
                "{kind:?} needs a second operand"
            )))
        }
        (_, Some(b)) => {
            if a.shape() != b.shape() {
                return Err(NmtError::dim("ewise", a.shape(), b.shape()));
            }
            for (o, &y) in out.data.iter_mut().zip(&b.data) {
                *o = match kind {
                    Ewise::Add => *o + y,
                    Ewise::Mul => *o * y,
                    Ewise::Sub => *o - y,
                    Ewise::Tanh | Ewise::Sigmoid => unreachable!(),
                };
            }
        }
    }
    Ok(out)
}

/// Backward of [`ewise`]. `out` is the forward result; unary kinds
/// differentiate through it (`tanh' = 1 − y²`, `σ' = y(1 − y)`).
pub fn ewise_backward(
    kind: Ewise,
    a: &Tensor,
    b: Option<&Tensor>,
    out: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Option<Tensor>)> {
    if dout.shape() != a.shape() {
        return Err(NmtError::dim("ewise_backward", a.shape(), dout.shape()));
    }
    let zip = |f: &dyn Fn(f64, f64) -> f64, x: &Tensor| Tensor {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().zip(&dout.data).map(|(&v, &g)| f(v, g)).collect(),
    };
    Ok(match kind {
        Ewise::Tanh => (zip(&|y, g| g * (1.0 - y * y), out), None),
        Ewise::Sigmoid => (zip(&|y, g| g * y * (1.0 - y), out), None),
        Ewise::Add => (dout.clone(), Some(dout.clone())),
        Ewise::Sub => (dout.clone(), Some(zip(&|_, g| -g, dout))),
        Ewise::Mul => {
            let b = b.ok_or_else(|| NmtError::Argument("Mul needs a second operand".into()))?;
            (zip(&|y, g| g * y, b), Some(zip(&|x, g| g * x, a)))
        }
    })
}

/// Appends columns of row-aligned parts in argument order.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| NmtError::Argument("concat of an empty list".into()))?;
    let rows = first.rows;
    let mut cols = 0;
    for p in parts {
        if p.rows != rows {
            return Err(NmtError::dim("concat", first.shape(), p.shape()));
        }
        cols += p.cols;
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Ok(Tensor { rows, cols, data })
}

/// Inverse of [`concat`]: slices columns at the given widths.
pub fn split(t: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = widths.iter().sum();
    if total != t.cols {
        return Err(NmtError::dim("split", t.shape(), (t.rows, total)));
    }
    let mut out: Vec<Tensor> = widths.iter().map(|&w| Tensor::zeros(t.rows, w)).collect();
    for r in 0..t.rows {
        let mut off = 0;
        for (part, &w) in out.iter_mut().zip(widths) {
            part.row_mut(r).copy_from_slice(&t.row(r)[off..off + w]);
            off += w;
        }
    }
    Ok(out)
}

/// Max-subtracted softmax over a slice.
pub fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

/// `ln Σ exp(v)`, max-shifted.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `dx = y ⊙ (dy − ⟨y, dy⟩)`
pub fn softmax_backward_slice(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner = dot(y, dy);
    y.iter().zip(dy).map(|(&p, &g)| p * (g - inner)).collect()
}

/// Row-wise softmax.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.is_empty() {
        return Err(NmtError::Argument("softmax of an empty vector".into()));
    }
    if !v.is_finite() {
        return Err(NmtError::Numeric("softmax input is not finite".into()));
    }
    let mut data = Vec::with_capacity(v.len());
    for r in 0..v.rows {
        data.extend(softmax_slice(v.row(r)));
    }
    Ok(Tensor {
        rows: v.rows,
        cols: v.cols,
        data,
    })
}

pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(NmtError::dim("softmax_backward", y.shape(), dy.shape()));
    }
    let mut data = Vec::with_capacity(y.len());
    for r in 0..y.rows {
        data.extend(softmax_backward_slice(y.row(r), dy.row(r)));
    }
    Ok(Tensor {
        rows: y.rows,
        cols: y.cols,
        data,
    })
}

/// A named learned tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.rows, value.cols);
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Parameter::new(name, Tensor::zeros(rows, cols))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }
}

/// A fixed, ordered registry of parameters.
pub trait ParamSet {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn num_scalars(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }
}

impl ParamSet for Vec<Parameter> {
    fn parameters(&self) -> Vec<&Parameter> {
        self.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.iter_mut().collect()
    }
}

pub const DEFAULT_FD_EPSILON: f64 = 1e-5;

/// Central-difference gradient of `loss` with respect to every scalar in
/// `params`, returned in registry order. Parameter values are restored
/// exactly after each probe.
pub fn finite_difference_grad<P, F>(params: &mut P, epsilon: f64, mut loss: F) -> Result<Vec<Tensor>>
where
    P: ParamSet + ?Sized,
    F: FnMut(&P) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(NmtError::Argument(format!("epsilon must be positive, got {epsilon}")));
    }
    let shapes: Vec<(usize, usize)> = params.parameters().iter().map(|p| p.shape()).collect();
    let mut grads = Vec::with_capacity(shapes.len());
    for (idx, &(rows, cols)) in shapes.iter().enumerate() {
        let mut g = Tensor::zeros(rows, cols);
        for j in 0..rows * cols {
            let orig = params.parameters()[idx].value.data[j];
            params.parameters_mut()[idx].value.data[j] = orig + epsilon;
            let plus = loss(params)?;
            params.parameters_mut()[idx].value.data[j] = orig - epsilon;
            let minus = loss(params)?;
            params.parameters_mut()[idx].value.data[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                let name = &params.parameters()[idx].name;
                return Err(NmtError::Numeric(format!(
                    "non-finite loss while probing {name}[{j}]"
                )));
            }
            g.data[j] = (plus - minus) / (2.0 * epsilon);
        }
        grads.push(g);
    }
    Ok(grads)
}
