use super::{Op, Result, Tensor, TensorError};

/// Norms below this are clamped when normalizing rows.
pub(crate) const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn require_rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::Contract(format!(
            "{op}: expected a rank-2 tensor, got shape {other:?}"
        ))),
    }
}

fn shape_error(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Applies `f` pairwise with rank-0 broadcasting; returns the output shape.
fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if a.shape() == b.shape() {
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((a.shape().to_vec(), out))
    } else if a.rank() == 0 {
        let x = a.data()[0];
        Ok((b.shape().to_vec(), b.data().iter().map(|&y| f(x, y)).collect()))
    } else if b.rank() == 0 {
        let y = b.data()[0];
        Ok((a.shape().to_vec(), a.data().iter().map(|&x| f(x, y)).collect()))
    } else {
        Err(shape_error(op, a, b))
    }
}

impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = require_rank2(self, "matmul")?;
        let (k2, n) = require_rank2(rhs, "matmul")?;
        if k != k2 {
            return Err(shape_error("matmul", self, rhs));
        }
        let data = matmul_raw(self.data(), rhs.data(), m, k, n);
        Ok(Tensor::result(vec![m, n], data, Op::MatMul(self.clone(), rhs.clone())))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = require_rank2(self, "transpose")?;
        let data = transpose_raw(self.data(), r, c);
        Ok(Tensor::result(vec![c, r], data, Op::Transpose(self.clone())))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_broadcast("add", self, rhs, |x, y| x + y)?;
        Ok(Tensor::result(shape, data, Op::Add(self.clone(), rhs.clone())))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_broadcast("sub", self, rhs, |x, y| x - y)?;
        Ok(Tensor::result(shape, data, Op::Sub(self.clone(), rhs.clone())))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_broadcast("mul", self, rhs, |x, y| x * y)?;
        Ok(Tensor::result(shape, data, Op::Mul(self.clone(), rhs.clone())))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        if let Some(index) = rhs.data().iter().position(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                index,
                value: 0.0,
            });
        }
        let (shape, data) = zip_broadcast("div", self, rhs, |x, y| x / y)?;
        Ok(Tensor::result(shape, data, Op::Div(self.clone(), rhs.clone())))
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.exp()).collect();
        Tensor::result(self.shape().to_vec(), data, Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(index) = self.data().iter().position(|&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value: self.data()[index],
            });
        }
        let data = self.data().iter().map(|v| v.ln()).collect();
        Ok(Tensor::result(self.shape().to_vec(), data, Op::Log(self.clone())))
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|v| -v).collect();
        Tensor::result(self.shape().to_vec(), data, Op::Neg(self.clone()))
    }

    /// Square root. The backward rule evaluates `1 / (2 sqrt(x + 1e-12))`
    /// so that a zero input yields a finite derivative.
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(index) = self.data().iter().position(|&v| v < 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "sqrt",
                index,
                value: self.data()[index],
            });
        }
        let data = self.data().iter().map(|v| v.sqrt()).collect();
        Ok(Tensor::result(self.shape().to_vec(), data, Op::Sqrt(self.clone())))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::result(self.shape().to_vec(), data, Op::Relu(self.clone()))
    }

    /// `max(x, floor)` elementwise. Gradient passes only where `x > floor`.
    pub fn max_with_scalar(&self, floor: f64) -> Tensor {
        let data = self.data().iter().map(|&v| if v > floor { v } else { floor }).collect();
        Tensor::result(self.shape().to_vec(), data, Op::MaxScalar(self.clone(), floor))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::result(self.shape().to_vec(), data, Op::Scale(self.clone(), factor))
    }

    pub fn reduce(&self, op: ReduceOp, axis: Option<usize>) -> Result<Tensor> {
        let (out_shape, outer, len, inner) = match axis {
            None => (Vec::new(), 1, self.numel(), 1),
            Some(ax) if ax < self.rank() => {
                let (outer, len, inner) = axis_extents(self.shape(), ax);
                let mut shape = self.shape().to_vec();
                shape.remove(ax);
                (shape, outer, len, inner)
            }
            Some(ax) => {
                return Err(TensorError::Contract(format!(
                    "reduce: axis {ax} out of range for shape {:?}",
                    self.shape()
                )))
            }
        };
        if len == 0 {
            return Err(TensorError::Domain {
                op: "reduce",
                index: 0,
                value: 0.0,
            });
        }
        let src = self.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let s: f64 = (0..len).map(|k| src[at(k)]).sum();
                        out.push(if op == ReduceOp::Mean { s / len as f64 } else { s });
                    }
                    ReduceOp::Max => {
                        let mut best = at(0);
                        for k in 1..len {
                            if src[at(k)] > src[best] {
                                best = at(k);
                            }
                        }
                        out.push(src[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        Ok(Tensor::result(
            out_shape,
            out,
            Op::Reduce {
                input: self.clone(),
                op,
                axis,
                argmax,
            },
        ))
    }

    pub fn sum(&self) -> Tensor {
        self.reduce(ReduceOp::Sum, None)
            .expect("full sum of a non-empty tensor")
    }

    pub fn mean(&self) -> Tensor {
        self.reduce(ReduceOp::Mean, None)
            .expect("full mean of a non-empty tensor")
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceOp::Sum, Some(axis))
    }

    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceOp::Max, Some(axis))
    }

    /// Row-wise softmax of `x / temperature`, stabilized by the row maximum.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        let (rows, cols) = require_rank2(self, "softmax_rows")?;
        check_temperature(temperature)?;
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.data().chunks(cols) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temperature));
            let e: Vec<f64> = row.iter().map(|&v| (v / temperature - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / s));
        }
        Ok(Tensor::result(
            vec![rows, cols],
            out,
            Op::SoftmaxRows(self.clone(), temperature),
        ))
    }

    /// Row-wise log-softmax of `x / temperature`.
    pub fn log_softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        let (rows, cols) = require_rank2(self, "log_softmax_rows")?;
        check_temperature(temperature)?;
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.data().chunks(cols) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temperature));
            let lse = row.iter().map(|&v| (v / temperature - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&v| v / temperature - m - lse));
        }
        Ok(Tensor::result(
            vec![rows, cols],
            out,
            Op::LogSoftmaxRows(self.clone(), temperature),
        ))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = require_rank2(self, "narrow_cols")?;
        if len == 0 || start + len > cols {
            return Err(TensorError::Contract(format!(
                "narrow_cols: columns {start}..{} out of range for width {cols}",
                start + len
            )));
        }
        let data = self
            .data()
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(Tensor::result(
            vec![rows, len],
            data,
            Op::NarrowCols(self.clone(), start),
        ))
    }

    /// Divides every row by its L2 norm (norm clamped below at 1e-12).
    pub fn normalize_rows(&self) -> Result<Tensor> {
        let (rows, cols) = require_rank2(self, "normalize_rows")?;
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.data().chunks(cols) {
            let n = row_norm(row).max(NORM_EPS);
            out.extend(row.iter().map(|v| v / n));
        }
        Ok(Tensor::result(vec![rows, cols], out, Op::NormalizeRows(self.clone())))
    }

    /// `D[i][j] = ||x_i - y_j||²` for row sets `x` (N×d) and `y` (M×d).
    pub fn pairwise_sq_dist(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, d) = require_rank2(self, "pairwise_sq_dist")?;
        let (m, d2) = require_rank2(rhs, "pairwise_sq_dist")?;
        if d != d2 {
            return Err(shape_error("pairwise_sq_dist", self, rhs));
        }
        let mut out = Vec::with_capacity(n * m);
        for x in self.data().chunks(d) {
            for y in rhs.data().chunks(d) {
                out.push(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum());
            }
        }
        Ok(Tensor::result(
            vec![n, m],
            out,
            Op::PairwiseSqDist(self.clone(), rhs.clone()),
        ))
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Contract(format!(
            "softmax temperature must be positive and finite, got {t}"
        )))
    }
}

pub(crate) fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
