//! Dense f32 kernels shared by inference and training.
//!
//! Matrices are row-major slices. The GEMM wrappers accept a transpose flag per
//! operand and hand strides straight to `matrixmultiply`, so no transposed
//! copies are ever materialized.

/// A read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols` matrix.
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// A column block `[col0, col0 + width)` of a row-major matrix whose rows are `ld` long.
    pub fn block(data: &'a [f32], rows: usize, ld: usize, col0: usize, width: usize) -> Self {
        debug_assert!(col0 + width <= ld);
        MatRef {
            data: &data[col0..],
            rows,
            cols: width,
            row_stride: ld,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// A mutable strided matrix view.
pub struct MatMut<'a> {
    pub data: &'a mut [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f32], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatMut {
            data,
            rows,
            cols,
            row_stride: cols,
        }
    }

    pub fn block(data: &'a mut [f32], rows: usize, ld: usize, col0: usize, width: usize) -> Self {
        debug_assert!(col0 + width <= ld);
        MatMut {
            data: &mut data[col0..],
            rows,
            cols: width,
            row_stride: ld,
        }
    }
}

/// `c = beta * c + a · b`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: MatMut<'_>, beta: f32) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows);
    assert_eq!(b.cols, c.cols);
    a.check();
    b.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    let last = (c.rows - 1) * c.row_stride + c.cols - 1;
    assert!(last < c.data.len(), "output view out of bounds");
    if a.cols == 0 {
        for r in 0..c.rows {
            for v in &mut c.data[r * c.row_stride..r * c.row_stride + c.cols] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above for its full strided extent,
    // and `c` is an exclusive borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride as isize,
            1,
        );
    }
}

/// `a · b` into a fresh row-major buffer.
pub fn matmul(a: MatRef<'_>, b: MatRef<'_>) -> Vec<f32> {
    let mut out = vec![0.0; a.rows * b.cols];
    gemm(a, b, MatMut::new(&mut out, a.rows, b.cols), 0.0);
    out
}

/// Row-wise RMS normalization with a learned gain. Returns the reciprocal RMS per row.
pub fn rms_norm(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) -> Vec<f32> {
    let d = gain.len();
    let rows = x.len() / d;
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let s = 1.0 / (ms + eps).sqrt();
        inv.push(s);
        for ((o, v), g) in out[r * d..(r + 1) * d].iter_mut().zip(row).zip(gain) {
            *o = v * s * g;
        }
    }
    inv
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

/// tanh-approximated GELU.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of f32 logits computed in f64.
pub fn softmax64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Log-softmax of f32 logits computed in f64.
pub fn log_softmax64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits
        .iter()
        .map(|&v| (v as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}
