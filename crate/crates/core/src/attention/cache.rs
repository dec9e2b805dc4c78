use alloc::vec::Vec;

use crate::error::{contract, Result};

/// Which cache segment a new key/value pair belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Prompt,
    Step,
}

/// Keys and values of one layer, split into the fixed prompt segment and the
/// segment of the reasoning step currently being generated.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    width: usize,
    prompt_k: Vec<T>,
    prompt_v: Vec<T>,
    step_k: Vec<T>,
    step_v: Vec<T>,
}

impl<T: Copy> LayerCache<T> {
    fn new(width: usize) -> Self {
        Self {
            width,
            prompt_k: Vec::new(),
            prompt_v: Vec::new(),
            step_k: Vec::new(),
            step_v: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_k.len() / self.width
    }

    pub fn step_len(&self) -> usize {
        self.step_k.len() / self.width
    }

    pub fn len(&self) -> usize {
        self.prompt_len() + self.step_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prompt_keys(&self) -> &[T] {
        &self.prompt_k
    }

    pub fn prompt_values(&self) -> &[T] {
        &self.prompt_v
    }

    pub fn step_keys(&self) -> &[T] {
        &self.step_k
    }

    pub fn step_values(&self) -> &[T] {
        &self.step_v
    }

    fn push(&mut self, seg: Segment, k: &[T], v: &[T]) {
        let (ks, vs) = match seg {
            Segment::Prompt => (&mut self.prompt_k, &mut self.prompt_v),
            Segment::Step => (&mut self.step_k, &mut self.step_v),
        };
        ks.extend_from_slice(k);
        vs.extend_from_slice(v);
    }
}

/// Two-segment key/value cache for every layer.
#[derive(Clone, Debug)]
pub struct KVCache<T> {
    layers: Vec<LayerCache<T>>,
    sealed: bool,
}

impl<T: Copy> KVCache<T> {
    pub fn new(n_layers: usize, width: usize) -> Self {
        Self {
            layers: (0..n_layers).map(|_| LayerCache::new(width)).collect(),
            sealed: false,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerCache<T> {
        &self.layers[l]
    }

    pub fn prompt_len(&self) -> usize {
        self.layers.first().map_or(0, |c| c.prompt_len())
    }

    pub fn step_len(&self) -> usize {
        self.layers.first().map_or(0, |c| c.step_len())
    }

    /// Cached positions per layer.
    pub fn len(&self) -> usize {
        self.prompt_len() + self.step_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Freezes the prompt segment; later prompt appends are rejected.
    pub fn seal_prompt(&mut self) {
        self.sealed = true;
    }

    pub fn push(&mut self, layer: usize, seg: Segment, k: &[T], v: &[T]) -> Result<()> {
        let cache = &mut self.layers[layer];
        if k.len() != cache.width || v.len() != cache.width {
            return Err(contract!("key/value width {} != {}", k.len(), cache.width));
        }
        match seg {
            Segment::Prompt if self.sealed => {
                return Err(contract!("prompt segment is fixed after prefill"))
            }
            Segment::Step if cache.prompt_len() == 0 => {
                return Err(contract!("step tokens need a prefilled prompt"))
            }
            _ => {}
        }
        cache.push(seg, k, v);
        Ok(())
    }

    /// Drops the current step's keys and values at every layer and returns
    /// the number of evicted positions.
    pub fn evict_step(&mut self) -> usize {
        let n = self.step_len();
        for c in &mut self.layers {
            c.step_k.clear();
            c.step_v.clear();
        }
        n
    }

    /// Analytic size of the cached keys and values.
    pub fn bytes_estimate(&self, bytes_per_elem: usize) -> usize {
        self.layers
            .iter()
            .map(|c| 2 * c.len() * c.width * bytes_per_elem)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn prefilled(prompt: usize) -> KVCache<f64> {
        let mut c = KVCache::new(2, 4);
        for l in 0..2 {
            for _ in 0..prompt {
                c.push(l, Segment::Prompt, &[1.0; 4], &[2.0; 4]).unwrap();
            }
        }
        c.seal_prompt();
        c
    }

    #[test]
    fn empty_step_eviction_is_noop() {
        let mut c = prefilled(3);
        assert_eq!(c.evict_step(), 0);
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn evicts_whole_step() {
        let mut c = prefilled(5);
        let before = c.layer(0).prompt_keys().to_vec();
        for l in 0..2 {
            for _ in 0..37 {
                c.push(l, Segment::Step, &[0.5; 4], &[0.5; 4]).unwrap();
            }
        }
        assert_eq!(c.evict_step(), 37);
        assert_eq!(c.step_len(), 0);
        assert_eq!(c.layer(1).step_len(), 0);
        assert_eq!(c.layer(0).prompt_keys(), &before[..]);
    }

    #[test]
    fn length_bookkeeping_over_steps() {
        let mut c = prefilled(6);
        for (t, n) in [3usize, 9, 1, 14, 5].into_iter().enumerate() {
            for l in 0..2 {
                for _ in 0..n {
                    c.push(l, Segment::Step, &[t as f64; 4], &[0.0; 4]).unwrap();
                }
            }
            assert!(c.len() <= 6 + n);
            assert_eq!(c.evict_step(), n);
            assert_eq!(c.len(), 6);
        }
    }

    #[test]
    fn rejects_step_without_prompt_and_late_prompt() {
        let mut c: KVCache<f64> = KVCache::new(1, 2);
        assert!(c.push(0, Segment::Step, &[0.0; 2], &[0.0; 2]).is_err());
        let mut c = prefilled(1);
        assert!(c.push(0, Segment::Prompt, &[0.0; 4], &[0.0; 4]).is_err());
        assert!(c.push(0, Segment::Step, &vec![0.0; 3], &[0.0; 4]).is_err());
    }
}
