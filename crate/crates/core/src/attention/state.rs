use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::Real;

/// Linear-attention state of one layer: one `d_head × d_head` matrix per head.
///
/// Row-vector convention: a token contributes `kᵀv` and a query reads `q·S`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateMatrix<T> {
    heads: usize,
    d_head: usize,
    data: Vec<T>,
}

impl<T: Real> StateMatrix<T> {
    pub fn zeros(heads: usize, d_head: usize) -> Self {
        Self {
            heads,
            d_head,
            data: vec![T::zero(); heads * d_head * d_head],
        }
    }

    pub fn from_data(heads: usize, d_head: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), heads * d_head * d_head);
        Self {
            heads,
            d_head,
            data,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn head(&self, h: usize) -> &[T] {
        let n = self.d_head * self.d_head;
        &self.data[h * n..(h + 1) * n]
    }

    pub fn head_mut(&mut self, h: usize) -> &mut [T] {
        let n = self.d_head * self.d_head;
        &mut self.data[h * n..(h + 1) * n]
    }

    /// `S_h += kᵀv`.
    pub fn accumulate(&mut self, h: usize, k: &[T], v: &[T]) {
        let d = self.d_head;
        let s = self.head_mut(h);
        for (a, &ka) in k.iter().enumerate() {
            for (b, &vb) in v.iter().enumerate() {
                s[a * d + b] = s[a * d + b] + ka * vb;
            }
        }
    }

    /// `q · S_h`.
    pub fn read(&self, h: usize, q: &[T]) -> Vec<T> {
        let d = self.d_head;
        let s = self.head(h);
        let mut out = vec![T::zero(); d];
        for (a, &qa) in q.iter().enumerate() {
            for b in 0..d {
                out[b] = out[b] + qa * s[a * d + b];
            }
        }
        out
    }

    pub fn frobenius_dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |s, (&a, &b)| s + a * b)
    }

    pub fn norm(&self) -> T {
        self.frobenius_dot(self).sqrt()
    }

    /// `self - other`.
    pub fn minus(&self, other: &Self) -> Self {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Self::from_data(self.heads, self.d_head, data)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|x| x.is_zero())
    }
}

/// Gradient of the online objective `L(S) = −⟨k·S, v⟩` at any `S`: `−kᵀv`.
pub fn inner_product_objective_grad<T: Real>(k: &[T], v: &[T]) -> Vec<T> {
    let mut g = Vec::with_capacity(k.len() * v.len());
    for &ka in k {
        for &vb in v {
            g.push(-(ka * vb));
        }
    }
    g
}

/// One gradient-descent step on the inner-product objective:
/// `S' = S − rate·∇L(S)`.
pub fn ttt_update<T: Real>(s: &[T], k: &[T], v: &[T], rate: T) -> Vec<T> {
    let g = inner_product_objective_grad(k, v);
    s.iter().zip(g).map(|(&x, gx)| x - rate * gx).collect()
}
