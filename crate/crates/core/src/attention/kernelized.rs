//! Causal kernelized attention `Σ_j φ(q_i)·φ(k_j) v_j / Σ_j φ(q_i)·φ(k_j)`
//! with `φ(x) = elu(x) + 1`, evaluated in both association orders. Used only
//! to demonstrate that the state form is a reassociation; the runtime state
//! is unnormalized.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::numerics::Real;

pub fn elu_plus_one<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

fn check<T>(q: &[Vec<T>], k: &[Vec<T>], v: &[Vec<T>]) -> Result<(usize, usize)> {
    let n = q.len();
    if k.len() != n || v.len() != n || n == 0 {
        return Err(contract!("q/k/v lengths {} {} {}", n, k.len(), v.len()));
    }
    let d = q[0].len();
    let dv = v[0].len();
    if q.iter().chain(k).any(|r| r.len() != d) || v.iter().any(|r| r.len() != dv) {
        return Err(contract!("ragged q/k/v rows"));
    }
    Ok((d, dv))
}

/// `(φ(Q)φ(K)ᵀ ⊙ M) V` row by row: every pair similarity is formed first.
pub fn kernel_attention_pairwise<T: Real>(q: &[Vec<T>], k: &[Vec<T>], v: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let (_, dv) = check(q, k, v)?;
    let fk: Vec<Vec<T>> = k.iter().map(|r| r.iter().map(|&x| elu_plus_one(x)).collect()).collect();
    Ok(q
        .iter()
        .enumerate()
        .map(|(i, qi)| {
            let fq: Vec<T> = qi.iter().map(|&x| elu_plus_one(x)).collect();
            let mut num = vec![T::zero(); dv];
            let mut den = T::zero();
            for j in 0..=i {
                let s = fq.iter().zip(&fk[j]).fold(T::zero(), |a, (&x, &y)| a + x * y);
                den = den + s;
                num.iter_mut().zip(&v[j]).for_each(|(o, &x)| *o = *o + s * x);
            }
            num.into_iter().map(|x| x / den).collect()
        })
        .collect())
}

/// `φ(Q)(φ(K)ᵀV)` with running sums `S = Σ φ(k)ᵀv` and `z = Σ φ(k)`.
pub fn kernel_attention_state<T: Real>(q: &[Vec<T>], k: &[Vec<T>], v: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let (d, dv) = check(q, k, v)?;
    let mut s = vec![T::zero(); d * dv];
    let mut z = vec![T::zero(); d];
    let mut out = Vec::with_capacity(q.len());
    for ((qi, ki), vi) in q.iter().zip(k).zip(v) {
        for (a, &x) in ki.iter().enumerate() {
            let fx = elu_plus_one(x);
            z[a] = z[a] + fx;
            for (b, &y) in vi.iter().enumerate() {
                s[a * dv + b] = s[a * dv + b] + fx * y;
            }
        }
        let fq: Vec<T> = qi.iter().map(|&x| elu_plus_one(x)).collect();
        let den = fq.iter().zip(&z).fold(T::zero(), |a, (&x, &y)| a + x * y);
        out.push(
            (0..dv)
                .map(|b| fq.iter().enumerate().fold(T::zero(), |acc, (a, &x)| acc + x * s[a * dv + b]) / den)
                .collect(),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_position_returns_its_value() {
        let q: Vec<Vec<f64>> = vec![vec![0.3, -2.0]];
        let k: Vec<Vec<f64>> = vec![vec![-1.0, 4.0]];
        let v: Vec<Vec<f64>> = vec![vec![5.0, 6.0, 7.0]];
        assert_eq!(kernel_attention_pairwise(&q, &k, &v).unwrap()[0], v[0]);
        for (a, b) in kernel_attention_state(&q, &k, &v).unwrap()[0].iter().zip(&v[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ragged_inputs_rejected() {
        let q = vec![vec![0.0; 2]];
        let k = vec![vec![0.0; 3]];
        let v = vec![vec![0.0; 1]];
        assert!(kernel_attention_state(&q, &k, &v).is_err());
        assert!(kernel_attention_pairwise::<f64>(&[], &[], &[]).is_err());
    }
}
