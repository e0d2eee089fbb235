//! Minimal dense-layer toolkit with hand-written backward passes.
//!
//! Everything is single-threaded f32 over row-major matrices, so a fixed
//! seed gives bit-identical parameters across runs on one machine.

pub mod checkpoint;
pub mod linear;
pub mod lstm;
pub mod optim;
pub mod transformer;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;
pub use linear::Linear;
pub use lstm::{BiLstm, Lstm};
pub use optim::AdamW;

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn uniform(rows: usize, cols: usize, bound: f32, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Columns `start..end` as a new matrix.
    pub fn cols_slice(&self, start: usize, end: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, end - start);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    /// Adds `src` into columns `start..start+src.cols`.
    pub fn add_cols_from(&mut self, start: usize, src: &Mat) {
        assert_eq!(self.rows, src.rows);
        for r in 0..self.rows {
            let dst = &mut self.row_mut(r)[start..start + src.cols];
            for (d, s) in dst.iter_mut().zip(src.row(r)) {
                *d += s;
            }
        }
    }

    pub fn hconcat(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.rows, b.rows);
        let mut out = Mat::zeros(a.rows, a.cols + b.cols);
        for r in 0..a.rows {
            out.row_mut(r)[..a.cols].copy_from_slice(a.row(r));
            out.row_mut(r)[a.cols..].copy_from_slice(b.row(r));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
pub fn gemm(alpha: f32, a: &Mat, ta: bool, b: &Mat, tb: bool, beta: f32, c: &mut Mat) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents were checked against the buffers above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn matmul(a: &Mat, ta: bool, b: &Mat, tb: bool) -> Mat {
    let m = if ta { a.cols } else { a.rows };
    let n = if tb { b.rows } else { b.cols };
    let mut c = Mat::zeros(m, n);
    gemm(1.0, a, ta, b, tb, 0.0, &mut c);
    c
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub w: Mat,
    pub g: Mat,
}

impl Param {
    pub fn new(w: Mat) -> Self {
        let g = Mat::zeros(w.rows, w.cols);
        Self { w, g }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }
}

/// Named access to every parameter of a model, in a stable order.
pub trait Parameters {
    fn params(&self) -> Vec<(String, &Param)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.w.data.len()).sum()
    }
}

pub(crate) fn prefixed<'a, T>(prefix: &str, items: Vec<(String, T)>) -> impl Iterator<Item = (String, T)> + 'a
where
    T: 'a,
{
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, p)| (format!("{prefix}.{n}"), p))
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [(String, &mut Param)], max_norm: f32) -> f32 {
    let sq: f64 = params
        .iter()
        .flat_map(|(_, p)| p.g.data.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-6);
        for (_, p) in params.iter_mut() {
            p.g.data.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place log-softmax of one row; returns the log partition.
pub fn log_softmax_in_place(row: &mut [f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter_mut().for_each(|x| *x -= lse);
    lse
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
