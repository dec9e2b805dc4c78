use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Half-open token range `[start, end)` of one reasoning step (or the answer).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }
}

/// Visibility matrix for parallel training passes that mirrors step-wise
/// generation with eviction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedMask {
    n: usize,
    allowed: Vec<bool>,
}

impl SegmentedMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn visible(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.allows(i, j)).collect()
    }

    /// Ordinary causal mask over `n` positions.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        Self { n, allowed }
    }
}

/// Checks that `spans` tile `[prompt_len, end)` in order without gaps.
pub fn validate_spans(prompt_len: usize, spans: &[Span]) -> Result<()> {
    let mut cursor = prompt_len;
    for (i, s) in spans.iter().enumerate() {
        if s.start < cursor {
            return Err(contract!("span {} {:?} overlaps the preceding region", i, s));
        }
        if s.start > cursor {
            return Err(contract!("span {} {:?} leaves a gap at {}", i, s, cursor));
        }
        if s.end <= s.start {
            return Err(contract!("span {} {:?} is empty", i, s));
        }
        cursor = s.end;
    }
    Ok(())
}

/// Position `i` sees `j` iff `j ≤ i` and `j` is a prompt position or shares
/// `i`'s span. Covers `prompt_len` plus all span tokens.
pub fn segmented_mask(prompt_len: usize, spans: &[Span]) -> Result<SegmentedMask> {
    validate_spans(prompt_len, spans)?;
    let n = spans.last().map_or(prompt_len, |s| s.end);
    let mut span_of = vec![usize::MAX; n];
    for (idx, s) in spans.iter().enumerate() {
        span_of[s.start..s.end].iter_mut().for_each(|x| *x = idx);
    }
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            allowed[i * n + j] = j < prompt_len || span_of[j] == span_of[i];
        }
    }
    Ok(SegmentedMask { n, allowed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_span_is_causal() {
        let m = segmented_mask(3, &[Span::new(3, 10)]).unwrap();
        assert_eq!(m, SegmentedMask::causal(10));
    }

    #[test]
    fn step_position_sees_prompt_and_own_step() {
        let m = segmented_mask(4, &[Span::new(4, 6), Span::new(6, 9)]).unwrap();
        assert_eq!(m.visible(7), vec![0, 1, 2, 3, 6, 7]);
        assert_eq!(m.visible(5), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(m.visible(2), vec![0, 1, 2]);
    }

    #[test]
    fn overlapping_spans_rejected() {
        assert!(segmented_mask(2, &[Span::new(2, 5), Span::new(4, 7)]).is_err());
        assert!(segmented_mask(2, &[Span::new(1, 5)]).is_err());
        assert!(segmented_mask(2, &[Span::new(3, 5)]).is_err());
        assert!(segmented_mask(2, &[Span::new(2, 2)]).is_err());
    }
}
