//! Dense row-major 2-D tensors of `f64` and the kernels the models need.
//!
//! Vectors are `1 x d` rows. Every operation is pure: inputs are borrowed,
//! a fresh tensor is returned.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("index {index} out of range for {op} (limit {limit})")]
    Index {
        op: &'static str,
        index: i64,
        limit: usize,
    },
    #[error("value {value} is not an integer index")]
    NotAnIndex { value: f64 },
    #[error("invalid shape {rows}x{cols}")]
    InvalidShape { rows: usize, cols: usize },
    #[error("data length {len} does not match shape {shape}")]
    DataLength { len: usize, shape: Shape },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryFn {
    Tanh,
    Sigmoid,
    Neg,
    Square,
}

impl UnaryFn {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::Sigmoid => sigmoid(x),
            UnaryFn::Neg => -x,
            UnaryFn::Square => x * x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryFn::Tanh => "tanh",
            UnaryFn::Sigmoid => "sigmoid",
            UnaryFn::Neg => "neg",
            UnaryFn::Square => "square",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryFn {
    Add,
    Sub,
    Hadamard,
}

impl BinaryFn {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryFn::Add => a + b,
            BinaryFn::Sub => a - b,
            BinaryFn::Hadamard => a * b,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryFn::Add => "add",
            BinaryFn::Sub => "sub",
            BinaryFn::Hadamard => "hadamard",
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Interpret a floating value as an integer index, tolerating rounding noise
/// below 1e-9.
pub fn as_index(value: f64) -> Result<i64, TensorError> {
    let r = value.round();
    if !value.is_finite() || (value - r).abs() >= 1e-9 {
        return Err(TensorError::NotAnIndex { value });
    }
    Ok(r as i64)
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::InvalidShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: Shape::new(rows, cols),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Build from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(rows.len(), cols, data).expect("non-empty literal")
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        assert!(shape.rows > 0 && shape.cols > 0, "empty shape {shape}");
        Tensor {
            rows: shape.rows,
            cols: shape.cols,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(Shape::new(rows, cols), 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(Shape::new(rows, cols), 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries uniform in `[-scale, scale]`.
    pub fn random_init<R: Rng + ?Sized>(shape: Shape, scale: f64, rng: &mut R) -> Self {
        assert!(scale > 0.0, "scale must be positive");
        let data = (0..shape.numel())
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Tensor {
            rows: shape.rows,
            cols: shape.cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| x * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::Dimension {
                op: "add",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    matmul_t(a, b, false, false)
}

/// `op(a) * op(b)` where `op` optionally transposes.
pub fn matmul_t(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor, TensorError> {
    let (m, k1) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k1 != k2 {
        return Err(TensorError::Dimension {
            op: "matmul",
            lhs: Shape::new(m, k1),
            rhs: Shape::new(k2, n),
        });
    }
    let mut out = vec![0.0; m * n];
    let at = |i: usize, k: usize| if ta { a.data[k * a.cols + i] } else { a.data[i * a.cols + k] };
    if !tb {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for k in 0..k1 {
                let aik = at(i, k);
                if aik == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let brow = &b.data[j * b.cols..(j + 1) * b.cols];
                let mut acc = 0.0;
                for (k, bv) in brow.iter().enumerate() {
                    acc += at(i, k) * bv;
                }
                out[i * n + j] = acc;
            }
        }
    }
    Ok(Tensor {
        rows: m,
        cols: n,
        data: out,
    })
}

pub fn apply_unary(x: &Tensor, f: UnaryFn) -> Tensor {
    x.map(|v| f.apply(v))
}

/// Backward rule of a unary function. `saved` is the forward output for
/// tanh/sigmoid and the forward input for square; it is ignored for neg.
pub fn unary_grad(upstream: &Tensor, saved: &Tensor, f: UnaryFn) -> Result<Tensor, TensorError> {
    let deriv: fn(f64) -> f64 = match f {
        UnaryFn::Tanh => |y| 1.0 - y * y,
        UnaryFn::Sigmoid => |y| y * (1.0 - y),
        UnaryFn::Neg => |_| -1.0,
        UnaryFn::Square => |x| 2.0 * x,
    };
    zip_with(upstream, saved, "unary_grad", |g, s| g * deriv(s))
}

pub fn apply_binary(a: &Tensor, b: &Tensor, f: BinaryFn) -> Result<Tensor, TensorError> {
    zip_with(a, b, f.name(), |x, y| f.apply(x, y))
}

fn zip_with(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

/// Stack `a` above `b`.
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.cols != b.cols {
        return Err(TensorError::Dimension {
            op: "concat_rows",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor {
        rows: a.rows + b.rows,
        cols: a.cols,
        data,
    })
}

/// Place `b` to the right of `a`.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.rows != b.rows {
        return Err(TensorError::Dimension {
            op: "concat_cols",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let cols = a.cols + b.cols;
    let mut data = Vec::with_capacity(a.rows * cols);
    for r in 0..a.rows {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Ok(Tensor {
        rows: a.rows,
        cols,
        data,
    })
}

pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor, TensorError> {
    if len == 0 || start + len > x.rows {
        return Err(TensorError::Index {
            op: "slice_rows",
            index: (start + len) as i64,
            limit: x.rows,
        });
    }
    Ok(Tensor {
        rows: len,
        cols: x.cols,
        data: x.data[start * x.cols..(start + len) * x.cols].to_vec(),
    })
}

pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor, TensorError> {
    if len == 0 || start + len > x.cols {
        return Err(TensorError::Index {
            op: "slice_cols",
            index: (start + len) as i64,
            limit: x.cols,
        });
    }
    let mut data = Vec::with_capacity(x.rows * len);
    for r in 0..x.rows {
        data.extend_from_slice(&x.row(r)[start..start + len]);
    }
    Ok(Tensor {
        rows: x.rows,
        cols: len,
        data,
    })
}

pub fn reshape(x: &Tensor, shape: Shape) -> Result<Tensor, TensorError> {
    if shape.numel() != x.data.len() || shape.rows == 0 {
        return Err(TensorError::Dimension {
            op: "reshape",
            lhs: x.shape(),
            rhs: shape,
        });
    }
    Ok(Tensor {
        rows: shape.rows,
        cols: shape.cols,
        data: x.data.clone(),
    })
}

fn check_row(op: &'static str, index: i64, limit: usize) -> Result<usize, TensorError> {
    if index < 0 || index as usize >= limit {
        return Err(TensorError::Index { op, index, limit });
    }
    Ok(index as usize)
}

pub fn gather_row(table: &Tensor, index: i64) -> Result<Tensor, TensorError> {
    let r = check_row("gather_row", index, table.rows)?;
    Ok(Tensor {
        rows: 1,
        cols: table.cols,
        data: table.row(r).to_vec(),
    })
}

/// Add the `1 x cols` row `grad` into row `index` of `table` in place.
pub fn scatter_add_row(table: &mut Tensor, index: i64, grad: &Tensor) -> Result<(), TensorError> {
    let r = check_row("scatter_add_row", index, table.rows)?;
    if grad.rows != 1 || grad.cols != table.cols {
        return Err(TensorError::Dimension {
            op: "scatter_add_row",
            lhs: table.shape(),
            rhs: grad.shape(),
        });
    }
    let cols = table.cols;
    for (t, g) in table.data[r * cols..(r + 1) * cols].iter_mut().zip(&grad.data) {
        *t += g;
    }
    Ok(())
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor {
        rows: logits.rows,
        cols: logits.cols,
        data: exps.into_iter().map(|e| e / total).collect(),
    }
}

/// Cross-entropy of a `1 x C` logit row against `label`, with the gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, label: i64) -> Result<(f64, Tensor), TensorError> {
    if logits.rows != 1 {
        return Err(TensorError::Dimension {
            op: "softmax_cross_entropy",
            lhs: logits.shape(),
            rhs: Shape::new(1, logits.cols),
        });
    }
    let label = check_row("softmax_cross_entropy", label, logits.cols)?;
    let max = logits.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.data.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum_exp.ln();
    let loss = log_z - logits.data[label];
    let mut grad = softmax(logits);
    grad.data[label] -= 1.0;
    Ok((loss, grad))
}
