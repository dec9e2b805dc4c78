use alloc::vec;
use alloc::vec::Vec;

use super::cache::{KVCache, Segment};
use super::projections::{GateParams, ProjectionSet};
use super::state::StateMatrix;
use crate::error::Result;
use crate::numerics::{softmax_slice, Matrix, Real, RopeTable};

/// Multiply-accumulate counter for the attention core (scores, weighted sums,
/// state reads and state updates).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttnStats {
    pub macs: u64,
}

/// How the linear-attention branch participates in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LaBranch<T> {
    /// Learned gate.
    Gated,
    /// Gate pinned to a constant; the state is still updated.
    FixedGate(T),
    /// Branch skipped entirely: plain softmax attention.
    Off,
}

/// One mixed attention block: restricted softmax attention plus a gated read
/// from the linear-attention state.
#[derive(Clone, Debug)]
pub struct MamLayer<T> {
    pub proj: ProjectionSet<T>,
    /// Effective linear-attention projections (frozen base plus low-rank delta).
    pub la_q: Matrix<T>,
    pub la_k: Matrix<T>,
    pub la_v: Matrix<T>,
    pub gate: GateParams<T>,
}

impl<T: Real> MamLayer<T> {
    /// Multi-head softmax attention over the cached prompt and current-step
    /// positions. The token's own key/value is appended to `seg` first, so a
    /// token always sees itself. Returns the concatenated head outputs.
    #[allow(clippy::too_many_arguments)]
    pub fn sa_forward(
        &self,
        h: &[T],
        cache: &mut KVCache<T>,
        layer: usize,
        pos: usize,
        seg: Segment,
        rope: Option<&RopeTable<T>>,
        stats: &mut AttnStats,
    ) -> Result<Vec<T>> {
        let p = &self.proj;
        let dh = p.d_head;
        let mut q = p.wq.vecmat(h);
        let mut k = p.wk.vecmat(h);
        let v = p.wv.vecmat(h);
        if let Some(rope) = rope {
            for hh in 0..p.heads {
                rope.apply(&mut q[hh * dh..(hh + 1) * dh], pos);
                rope.apply(&mut k[hh * dh..(hh + 1) * dh], pos);
            }
        }
        cache.push(layer, seg, &k, &v)?;

        let c = cache.layer(layer);
        let w = c.width();
        let n = c.len();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = vec![T::zero(); w];
        let mut scores = Vec::with_capacity(n);
        let segments = [
            (c.prompt_keys(), c.prompt_values()),
            (c.step_keys(), c.step_values()),
        ];
        for hh in 0..p.heads {
            let off = hh * dh;
            let qh = &q[off..off + dh];
            scores.clear();
            for (keys, _) in segments {
                for kr in keys.chunks_exact(w) {
                    let kh = &kr[off..off + dh];
                    let s = qh.iter().zip(kh).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    scores.push(s * scale);
                }
            }
            softmax_slice(&mut scores);
            let oh = &mut out[off..off + dh];
            let mut idx = 0;
            for (_, values) in segments {
                for vr in values.chunks_exact(w) {
                    let pj = scores[idx];
                    idx += 1;
                    for (o, &x) in oh.iter_mut().zip(&vr[off..off + dh]) {
                        *o = *o + pj * x;
                    }
                }
            }
        }
        stats.macs += 2 * (n * w) as u64;
        Ok(out)
    }

    /// Reads `q·S` from the state as it stood before this token, then adds the
    /// token's `kᵀv` to it.
    pub fn la_forward(&self, h: &[T], state: &mut StateMatrix<T>, stats: &mut AttnStats) -> Vec<T> {
        let dh = self.proj.d_head;
        let q = self.la_q.vecmat(h);
        let k = self.la_k.vecmat(h);
        let v = self.la_v.vecmat(h);
        let mut out = Vec::with_capacity(q.len());
        for hh in 0..self.proj.heads {
            let r = hh * dh..(hh + 1) * dh;
            out.extend(state.read(hh, &q[r.clone()]));
            state.accumulate(hh, &k[r.clone()], &v[r]);
        }
        stats.macs += 2 * (self.proj.heads * dh * dh) as u64;
        out
    }

    pub fn gate(&self, h: &[T]) -> Vec<T> {
        self.gate.forward(h)
    }

    /// `W_O(gate ⊙ o + ĥ)`.
    #[allow(clippy::too_many_arguments)]
    pub fn mam_forward(
        &self,
        h: &[T],
        cache: &mut KVCache<T>,
        state: &mut StateMatrix<T>,
        layer: usize,
        pos: usize,
        seg: Segment,
        rope: Option<&RopeTable<T>>,
        branch: LaBranch<T>,
        stats: &mut AttnStats,
    ) -> Result<Vec<T>> {
        let mut mixed = self.sa_forward(h, cache, layer, pos, seg, rope, stats)?;
        if branch != LaBranch::Off {
            let o = self.la_forward(h, state, stats);
            let g = match branch {
                LaBranch::FixedGate(x) => vec![x; o.len()],
                _ => self.gate(h),
            };
            for ((m, &gi), &oi) in mixed.iter_mut().zip(&g).zip(&o) {
                *m = gi * oi + *m;
            }
        }
        Ok(self.proj.wo.vecmat(&mixed))
    }
}
