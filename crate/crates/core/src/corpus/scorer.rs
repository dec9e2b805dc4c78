use alloc::vec;
use alloc::vec::Vec;

use crate::attention::Segment;
use crate::error::Result;
use crate::model::{EmbeddingSource, InferenceModel, Model, RuntimeOptions};
use crate::numerics::softmax_slice;

/// Next-token predictive distribution summaries used to find transition
/// tokens and to embed steps.
pub trait Scorer {
    /// Entropy (nats) of the predicted next token after each position.
    fn entropies(&self, ids: &[usize]) -> Result<Vec<f64>>;
    /// One feature vector per position.
    fn features(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>>;
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * libm::log(x)).sum::<f64>()
}

/// Empirical next-token distribution of each token type.
#[derive(Clone, Debug)]
pub struct BigramScorer {
    vocab: usize,
    probs: Vec<Vec<f64>>,
}

impl BigramScorer {
    pub fn fit<'a, I: IntoIterator<Item = &'a [usize]>>(vocab: usize, sequences: I) -> Self {
        let mut counts = vec![vec![0.0f64; vocab]; vocab];
        for seq in sequences {
            for w in seq.windows(2) {
                counts[w[0]][w[1]] += 1.0;
            }
        }
        for row in counts.iter_mut() {
            let z: f64 = row.iter().sum();
            if z > 0.0 {
                row.iter_mut().for_each(|x| *x /= z);
            }
        }
        Self { vocab, probs: counts }
    }

    pub fn next_distribution(&self, id: usize) -> &[f64] {
        &self.probs[id.min(self.vocab - 1)]
    }
}

impl Scorer for BigramScorer {
    fn entropies(&self, ids: &[usize]) -> Result<Vec<f64>> {
        Ok(ids.iter().map(|&i| entropy(self.next_distribution(i))).collect())
    }

    fn features(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(ids.iter().map(|&i| self.next_distribution(i).to_vec()).collect())
    }
}

/// A trained base model run with full causal attention.
pub struct ModelScorer {
    rt: InferenceModel<f64>,
}

impl ModelScorer {
    pub fn new(model: &Model) -> Result<Self> {
        Ok(Self {
            rt: InferenceModel::new(model, EmbeddingSource::Base)?,
        })
    }

    fn run(&self, ids: &[usize]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut ctx = self.rt.new_context(RuntimeOptions::vanilla());
        let mut out = Vec::with_capacity(ids.len());
        for &t in ids {
            let h = self.rt.forward_hidden(&mut ctx, t, Segment::Prompt)?;
            let mut p = self.rt.logits(&h);
            softmax_slice(&mut p);
            out.push((h, p));
        }
        Ok(out)
    }
}

impl Scorer for ModelScorer {
    fn entropies(&self, ids: &[usize]) -> Result<Vec<f64>> {
        Ok(self.run(ids)?.iter().map(|(_, p)| entropy(p)).collect())
    }

    fn features(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(ids)?.into_iter().map(|(h, _)| h).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bigram_entropy() {
        let s = BigramScorer::fit(4, [&[0usize, 1, 0, 2, 0, 1][..]]);
        let h = s.entropies(&[0, 1, 3]).unwrap();
        let want = -(2.0 / 3.0 * libm::log(2.0 / 3.0) + 1.0 / 3.0 * libm::log(1.0 / 3.0));
        assert!((h[0] - want).abs() < 1e-12);
        assert_eq!(h[1], 0.0);
        assert_eq!(h[2], 0.0);
    }
}
