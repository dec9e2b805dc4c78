use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::Float;

use super::Tensor;

/// Scalar type of the inference runtime: `f64` for verification, `f32` for
/// benchmarks.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Row-major matrix used on the token-by-token path.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|&x| T::lit(x)).collect(),
        }
    }

    /// `x · self` for a row vector `x` of length `rows`.
    pub fn vecmat(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        self.vecmat_into(x, &mut out);
        out
    }

    pub fn vecmat_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &w) in out.iter_mut().zip(row) {
                *o = *o + xi * w;
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// `x / rms(x)` scaled elementwise by `gain`.
pub fn rms_norm<T: Real>(x: &[T], gain: &[T], eps: T) -> Vec<T> {
    let n = T::lit(x.len() as f64);
    let ms = x.iter().fold(T::zero(), |s, &v| s + v * v) / n;
    let r = (ms + eps).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v / r * g).collect()
}

pub fn softmax_slice<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Precomputed rotary angles, one row of `(cos, sin)` pairs per position.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    pub fn new(width: usize, max_pos: usize, base: f64) -> Self {
        let half = width / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for p in 0..max_pos {
            for m in 0..half {
                let theta = p as f64 * libm::pow(base, -2.0 * m as f64 / width as f64);
                cos.push(T::lit(libm::cos(theta)));
                sin.push(T::lit(libm::sin(theta)));
            }
        }
        Self { half, cos, sin }
    }

    pub fn max_pos(&self) -> usize {
        if self.half == 0 {
            usize::MAX
        } else {
            self.cos.len() / self.half
        }
    }

    pub fn apply(&self, row: &mut [T], pos: usize) {
        let base = pos * self.half;
        for m in 0..self.half {
            let (c, s) = (self.cos[base + m], self.sin[base + m]);
            let (x0, x1) = (row[2 * m], row[2 * m + 1]);
            row[2 * m] = x0 * c - x1 * s;
            row[2 * m + 1] = x0 * s + x1 * c;
        }
    }
}
