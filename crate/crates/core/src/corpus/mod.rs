//! Chain-of-thought corpora: tokenisation, transition-token discovery, step
//! segmentation, pattern clustering and annotation, plus a synthetic
//! generator with known step styles.

mod cluster;
mod scorer;
mod synth;
mod tokenizer;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use cluster::{adjusted_rand_index, minibatch_kmeans, normalize, ClusterModel};
pub use scorer::{BigramScorer, ModelScorer, Scorer};
pub use synth::{synth_corpus, synth_records, synth_vocab, SynthParams, SynthRecord, MARKERS};
pub use tokenizer::{Encoded, Vocab, ANSWER, EOS, UNK};

use crate::attention::Span;
use crate::error::{contract, Result};
use crate::model::{SequenceLayout, SpecialTokenTable};
use crate::reasoning::kept_step_indices;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTSample {
    pub query: String,
    pub thinking: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedStep {
    /// 1-based pattern id.
    pub pattern: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub query: String,
    pub thinking: String,
    pub answer: String,
    pub steps: Vec<AnnotatedStep>,
}

impl AnnotatedSample {
    /// The thinking text with markers removed: the step texts concatenated.
    pub fn strip(&self) -> String {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransitionConfig {
    pub top_fraction: f64,
    pub min_count: usize,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        Self {
            top_fraction: 0.02,
            min_count: 5,
        }
    }
}

/// Sentence-initial token types (first token excluded) ranked by the mean
/// entropy of the scorer's next-token prediction at their occurrences. Of
/// the types seen at least `min_count` times, the top
/// `ceil(top_fraction · count)` are returned; ties favour lower ids.
pub fn extract_transition_tokens(
    corpus: &[Encoded],
    scorer: &dyn Scorer,
    cfg: &TransitionConfig,
) -> Result<BTreeSet<usize>> {
    if corpus.is_empty() {
        return Err(contract!("transition extraction over an empty corpus"));
    }
    if !(cfg.top_fraction > 0.0 && cfg.top_fraction <= 1.0) {
        return Err(contract!("top_fraction {} outside (0, 1]", cfg.top_fraction));
    }
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for enc in corpus {
        if enc.len() < 2 {
            continue;
        }
        let h = scorer.entropies(&enc.ids)?;
        for i in 1..enc.len() {
            if enc.sentence_start[i] {
                let e = acc.entry(enc.ids[i]).or_insert((0.0, 0));
                e.0 += h[i];
                e.1 += 1;
            }
        }
    }
    let mut cands: Vec<(usize, f64)> = acc
        .into_iter()
        .filter(|(_, (_, c))| *c >= cfg.min_count)
        .map(|(id, (s, c))| (id, s / c as f64))
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = libm::ceil(cfg.top_fraction * cands.len() as f64) as usize;
    Ok(cands.into_iter().take(keep).map(|c| c.0).collect())
}

/// Splits before every sentence-initial transition token after the first
/// position. Spans are token-index ranges covering the whole sequence.
pub fn segment(thinking: &Encoded, transitions: &BTreeSet<usize>) -> Vec<Span> {
    let n = thinking.len();
    if n == 0 {
        return Vec::new();
    }
    let mut spans = Vec::new();
    let mut start = 0;
    for i in 1..n {
        if thinking.sentence_start[i] && transitions.contains(&thinking.ids[i]) {
            spans.push(Span::new(start, i));
            start = i;
        }
    }
    spans.push(Span::new(start, n));
    spans
}

/// Text of a token span, including the whitespace attached to its tokens.
pub fn span_text<'a>(text: &'a str, enc: &Encoded, span: Span) -> &'a str {
    let a = if span.start == 0 { 0 } else { enc.ranges[span.start].0 };
    let b = if span.end == enc.len() { text.len() } else { enc.ranges[span.end - 1].1 };
    &text[a..b]
}

/// Unit-norm mean of the scorer's per-token features.
pub fn embed_step(step: &[usize], scorer: &dyn Scorer) -> Result<Vec<f64>> {
    if step.is_empty() {
        return Err(contract!("empty step"));
    }
    let feats = scorer.features(step)?;
    let mut mean = alloc::vec![0.0; feats[0].len()];
    for f in &feats {
        mean.iter_mut().zip(f).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= feats.len() as f64);
    if !normalize(&mut mean) {
        return Err(contract!("step features average to zero"));
    }
    Ok(mean)
}

/// Labels each span with its nearest centroid (1-based).
pub fn annotate(sample: &CoTSample, enc: &Encoded, spans: &[Span], embeddings: &[Vec<f64>], model: &ClusterModel) -> AnnotatedSample {
    let steps = spans
        .iter()
        .zip(embeddings)
        .map(|(&s, e)| AnnotatedStep {
            pattern: model.assign(e) + 1,
            text: String::from(span_text(&sample.thinking, enc, s)),
        })
        .collect();
    AnnotatedSample {
        query: sample.query.clone(),
        thinking: sample.thinking.clone(),
        answer: sample.answer.clone(),
        steps,
    }
}

/// Drops the lowest-reward steps, keeping `ceil(keep_fraction · n)` of them
/// in their original order.
pub fn prune_steps(sample: &AnnotatedSample, rewards: &[f64], keep_fraction: f64) -> Result<AnnotatedSample> {
    if rewards.len() != sample.steps.len() {
        return Err(contract!(
            "{} rewards for {} steps",
            rewards.len(),
            sample.steps.len()
        ));
    }
    let kept = kept_step_indices(rewards, keep_fraction)?;
    let steps: Vec<AnnotatedStep> = kept.into_iter().map(|i| sample.steps[i].clone()).collect();
    let mut out = AnnotatedSample {
        steps,
        ..sample.clone()
    };
    out.thinking = out.strip();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub transitions: TransitionConfig,
    pub k: usize,
    pub batch: usize,
    pub iters: usize,
    pub refine_passes: usize,
    pub seed: u64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            transitions: TransitionConfig::default(),
            k: 8,
            batch: 256,
            iters: 100,
            refine_passes: 10,
            seed: 0,
        }
    }
}

impl SegmentConfig {
    /// Preset for the synthetic arithmetic corpus, whose vocabulary is small
    /// enough that the markers sit in the top 40% of candidates.
    pub fn synthetic(k: usize, seed: u64) -> Self {
        Self {
            transitions: TransitionConfig {
                top_fraction: 0.4,
                min_count: 5,
            },
            k,
            iters: 200,
            seed,
            ..Self::default()
        }
    }
}

pub struct Segmentation {
    pub transitions: BTreeSet<usize>,
    pub model: ClusterModel,
    pub samples: Vec<AnnotatedSample>,
    /// Objective before refinement and after each full-batch pass.
    pub refine_history: Vec<f64>,
}

/// Transition extraction, segmentation, clustering and annotation over a
/// whole corpus.
pub fn segment_corpus(corpus: &[CoTSample], vocab: &Vocab, scorer: &dyn Scorer, cfg: &SegmentConfig) -> Result<Segmentation> {
    let encoded: Vec<Encoded> = corpus.iter().map(|s| vocab.encode(&s.thinking)).collect();
    let transitions = extract_transition_tokens(&encoded, scorer, &cfg.transitions)?;
    let mut all_spans = Vec::with_capacity(corpus.len());
    let mut vectors = Vec::new();
    for enc in &encoded {
        let spans = segment(enc, &transitions);
        for s in &spans {
            vectors.push(embed_step(&enc.ids[s.start..s.end], scorer)?);
        }
        all_spans.push(spans);
    }
    let mut model = minibatch_kmeans(&vectors, cfg.k, cfg.batch, cfg.iters, cfg.seed)?;
    let refine_history = model.refine(&vectors, cfg.refine_passes);
    let mut samples = Vec::with_capacity(corpus.len());
    let mut at = 0;
    for ((sample, enc), spans) in corpus.iter().zip(&encoded).zip(&all_spans) {
        samples.push(annotate(sample, enc, spans, &vectors[at..at + spans.len()], &model));
        at += spans.len();
    }
    Ok(Segmentation {
        transitions,
        model,
        samples,
        refine_history,
    })
}

/// Token form of an annotated sample for training and replay.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub tokens: Vec<usize>,
    pub layout: SequenceLayout,
    pub patterns: Vec<usize>,
}

impl EncodedSample {
    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.layout.prompt_len]
    }

    /// Step token runs, markers included; the answer span is excluded.
    pub fn steps(&self) -> Vec<Vec<usize>> {
        let spans = &self.layout.spans;
        spans[..spans.len() - 1].iter().map(|s| self.tokens[s.start..s.end].to_vec()).collect()
    }

    /// Answer tokens between the answer marker and the end marker.
    pub fn answer(&self) -> &[usize] {
        let s = self.layout.spans.last().expect("answer span");
        &self.tokens[s.start + 1..s.end - 1]
    }
}

/// `query · (start_c body end_c)* · <ans> answer <eos>`; each step and the
/// answer region form one span.
pub fn encode_annotated(sample: &AnnotatedSample, vocab: &Vocab, table: &SpecialTokenTable) -> Result<EncodedSample> {
    if vocab.len() > table.base_vocab {
        return Err(contract!("vocabulary of {} exceeds model's {}", vocab.len(), table.base_vocab));
    }
    let mut tokens = vocab.encode(&sample.query).ids;
    if tokens.is_empty() {
        return Err(contract!("empty query"));
    }
    let prompt_len = tokens.len();
    let mut spans = Vec::new();
    let mut patterns = Vec::new();
    for step in &sample.steps {
        if step.pattern == 0 || step.pattern > table.n_patterns {
            return Err(contract!("pattern {} outside 1..={}", step.pattern, table.n_patterns));
        }
        let start = tokens.len();
        tokens.push(table.start(step.pattern));
        tokens.extend(vocab.encode(&step.text).ids);
        tokens.push(table.end(step.pattern));
        spans.push(Span::new(start, tokens.len()));
        patterns.push(step.pattern);
    }
    let start = tokens.len();
    tokens.push(table.answer);
    tokens.extend(vocab.encode(&sample.answer).ids);
    tokens.push(table.eos);
    spans.push(Span::new(start, tokens.len()));
    Ok(EncodedSample {
        tokens,
        layout: SequenceLayout { prompt_len, spans },
        patterns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn segment_examples() {
        let v = Vocab::new(["a", "Wait", "."]);
        let enc = v.encode("a . a . Wait a . Wait a");
        let t: BTreeSet<usize> = [v.id("Wait")].into();
        let spans = segment(&enc, &t);
        assert_eq!(spans, vec![Span::new(0, 4), Span::new(4, 7), Span::new(7, 9)]);
        let none = segment(&enc, &[v.id("a") + 100].into());
        assert_eq!(none, vec![Span::new(0, 9)]);
    }

    #[test]
    fn split_at_ten_and_twenty_five() {
        let mut ids = vec![0usize; 40];
        let mut starts = vec![false; 40];
        ids[10] = 7;
        ids[25] = 7;
        ids[30] = 7;
        starts[0] = true;
        starts[10] = true;
        starts[25] = true;
        let enc = Encoded {
            ranges: (0..40).map(|i| (i, i + 1)).collect(),
            ids,
            sentence_start: starts,
        };
        let spans = segment(&enc, &[7].into());
        assert_eq!(spans, vec![Span::new(0, 10), Span::new(10, 25), Span::new(25, 40)]);
    }

    #[test]
    fn single_sentence_has_no_candidates() {
        let v = Vocab::new(["x", "y"]);
        let corpus: Vec<Encoded> = (0..10).map(|_| v.encode("x y x y")).collect();
        let scorer = BigramScorer::fit(v.len(), corpus.iter().map(|e| e.ids.as_slice()));
        let cfg = TransitionConfig {
            top_fraction: 1.0,
            min_count: 1,
        };
        assert!(extract_transition_tokens(&corpus, &scorer, &cfg).unwrap().is_empty());
        assert!(extract_transition_tokens(&[], &scorer, &cfg).is_err());
    }

    #[test]
    fn prune_example_keeps_first_and_third() {
        let s = AnnotatedSample {
            query: "q".into(),
            thinking: "a b c d".into(),
            answer: "x".into(),
            steps: ["a", " b", " c", " d"]
                .iter()
                .map(|t| AnnotatedStep {
                    pattern: 1,
                    text: (*t).into(),
                })
                .collect(),
        };
        let p = prune_steps(&s, &[0.9, 0.1, 0.8, 0.5], 0.5).unwrap();
        assert_eq!(p.thinking, "a c");
        assert_eq!(prune_steps(&s, &[0.0; 4], 1.0).unwrap(), s);
        assert!(prune_steps(&s, &[0.0; 3], 1.0).is_err());
    }
}
