use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(contract!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(contract!("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count, treating a rank-1 tensor as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.data.len() != other.data.len() {
            return Err(Error::Shape {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// FNV-1a over the bit patterns of shape and data.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for &s in &self.shape {
            eat(s as u64);
        }
        for &x in &self.data {
            eat(x.to_bits());
        }
        h
    }
}

/// Matrix product of `[m×k]` by `[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 || a.shape.len() > 2 || b.shape.len() > 2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out += a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let c = m.cols();
    let mut out = m.clone();
    out.requires_grad = false;
    if c == 0 {
        return out;
    }
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let i = Tensor::eye(2);
        assert_eq!(matmul(&i, &i).unwrap(), i);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert!(c.max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&Tensor::from_rows(&[&[0.0, 0.0, 0.0]]).unwrap());
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::from_rows(&[&[1000.0, 0.0]]).unwrap());
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] < 1e-300);

        let s = softmax_rows(&Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, &p) in s.data().iter().enumerate() {
            assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = Tensor::randn(&[4, 6], 1.0, &mut rng);
            let b = Tensor::randn(&[6, 5], 1.0, &mut rng);
            let c = Tensor::randn(&[5, 3], 1.0, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-9);
        }
    }

    #[test]
    fn checksum_tracks_bits() {
        let a = Tensor::ones(&[3]);
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.data_mut()[1] = 1.0 + f64::EPSILON;
        assert_ne!(a.checksum(), b.checksum());
    }
}
