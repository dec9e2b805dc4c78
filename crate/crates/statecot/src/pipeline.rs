//! Corpus → segmentation → encoded training data → base model, plus the
//! per-sample pruning pass. Shared by the commands and the acceptance suite.

use anyhow::{ensure, Context, Result};
use statecot_core::corpus::{
    encode_annotated, prune_steps, segment_corpus, synth_corpus, synth_vocab, AnnotatedSample, BigramScorer,
    CoTSample, EncodedSample, ModelScorer, Scorer, SegmentConfig, Segmentation, Vocab,
};
use statecot_core::model::{
    GenerateOptions, GenerationTrace, InferenceModel, Model, ModelConfig, RuntimeOptions, SpecialTokenTable,
};
use statecot_core::numerics::Real;
use statecot_core::reasoning::{rewards_against_mean, sample_quality};
use statecot_core::training::{pretrain_base, TrainConfig, TrainReport};

use crate::config::{RunConfig, ScorerKind};

/// Vocabulary over every word of the corpus, in first-seen order.
pub fn corpus_vocab(corpus: &[CoTSample]) -> Vocab {
    Vocab::from_texts(corpus.iter().flat_map(|s| [s.query.as_str(), s.thinking.as_str(), s.answer.as_str()]))
}

pub fn bigram_scorer(corpus: &[CoTSample], vocab: &Vocab) -> BigramScorer {
    let enc: Vec<Vec<usize>> = corpus.iter().map(|s| vocab.encode(&s.thinking).ids).collect();
    BigramScorer::fit(vocab.len(), enc.iter().map(|e| e.as_slice()))
}

pub fn segment(
    corpus: &[CoTSample],
    vocab: &Vocab,
    kind: ScorerKind,
    base: Option<&Model>,
    cfg: &SegmentConfig,
) -> Result<Segmentation> {
    let seg = match kind {
        ScorerKind::Bigram => {
            let scorer = bigram_scorer(corpus, vocab);
            segment_corpus(corpus, vocab, &scorer as &dyn Scorer, cfg)?
        }
        ScorerKind::Model => {
            let model = base.context("the model scorer needs a base model")?;
            let scorer = ModelScorer::new(model)?;
            segment_corpus(corpus, vocab, &scorer as &dyn Scorer, cfg)?
        }
    };
    Ok(seg)
}

/// `template` with the vocabulary and pattern count of a dataset.
pub fn model_config(template: &ModelConfig, vocab: &Vocab, n_patterns: usize) -> ModelConfig {
    ModelConfig {
        base_vocab: vocab.len(),
        n_patterns,
        ..template.clone()
    }
}

pub fn encode_all(samples: &[AnnotatedSample], vocab: &Vocab, table: &SpecialTokenTable) -> Result<Vec<EncodedSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| encode_annotated(s, vocab, table).with_context(|| format!("sample {i}")))
        .collect()
}

pub struct Dataset {
    pub corpus: Vec<CoTSample>,
    pub vocab: Vocab,
    pub segmentation: Segmentation,
    pub config: ModelConfig,
    pub encoded: Vec<EncodedSample>,
}

/// Synthesizes and segments a corpus as configured.
pub fn synthetic_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let corpus = synth_corpus(cfg.seed, cfg.synth.samples, &cfg.synth.params);
    let vocab = synth_vocab(&cfg.synth.params);
    let segmentation = segment(&corpus, &vocab, ScorerKind::Bigram, None, &cfg.segment.cluster)?;
    let config = model_config(&cfg.model, &vocab, cfg.segment.cluster.k);
    let encoded = encode_all(&segmentation.samples, &vocab, &config.tokens())?;
    Ok(Dataset {
        corpus,
        vocab,
        segmentation,
        config,
        encoded,
    })
}

/// A randomly initialised model trained as an ordinary causal transformer.
pub fn pretrain(config: ModelConfig, data: &[EncodedSample], train: &TrainConfig, seed: u64) -> Result<(Model, TrainReport)> {
    let mut model = Model::random(config, seed)?;
    let report = pretrain_base(&mut model, data, train, &mut |_| {})?;
    Ok((model, report))
}

pub fn prompt_tokens(vocab: &Vocab, query: &str) -> Vec<usize> {
    vocab.encode(query).ids
}

pub fn answer_text(vocab: &Vocab, trace: &GenerationTrace) -> Result<String> {
    Ok(vocab.decode(&trace.answer)?)
}

/// Body tokens of the annotated steps, each wrapped in its markers.
pub fn step_tokens(sample: &AnnotatedSample, vocab: &Vocab, table: &SpecialTokenTable) -> Vec<Vec<usize>> {
    sample
        .steps
        .iter()
        .map(|s| {
            let mut t = vec![table.start(s.pattern)];
            t.extend(vocab.encode(&s.text).ids);
            t.push(table.end(s.pattern));
            t
        })
        .collect()
}

pub struct Pruned {
    pub sample: AnnotatedSample,
    pub rewards: Vec<f64>,
    pub quality: f64,
}

/// Replays a sample's steps, scores each against the trace's mean step
/// delta and drops the lowest-scoring ones.
pub fn prune_sample<T: Real>(
    rt: &InferenceModel<T>,
    runtime: RuntimeOptions,
    vocab: &Vocab,
    sample: &AnnotatedSample,
    keep_fraction: f64,
) -> Result<Pruned> {
    ensure!(!sample.steps.is_empty(), "sample has no steps to prune");
    let table = rt.tokens();
    let prompt = prompt_tokens(vocab, &sample.query);
    let steps = step_tokens(sample, vocab, &table);
    let refs: Vec<&[usize]> = steps.iter().map(|s| s.as_slice()).collect();
    let reports = rt.replay_steps(runtime, &prompt, &refs)?;
    let deltas: Vec<_> = reports.into_iter().map(|r| r.raw_delta).collect();
    let rewards = rewards_against_mean(&deltas)?;
    let quality = sample_quality(&rewards)?;
    Ok(Pruned {
        sample: prune_steps(sample, &rewards, keep_fraction)?,
        rewards,
        quality,
    })
}

/// Generation continuing from already-written steps.
pub fn regenerate<T: Real>(
    rt: &InferenceModel<T>,
    vocab: &Vocab,
    sample: &AnnotatedSample,
    opts: &GenerateOptions,
) -> Result<GenerationTrace> {
    let table = rt.tokens();
    let prompt = prompt_tokens(vocab, &sample.query);
    let steps = step_tokens(sample, vocab, &table);
    let opts = GenerateOptions {
        max_steps: Some(steps.len()),
        ..opts.clone()
    };
    Ok(rt.generate_with_prefix(&prompt, &steps, &opts, &mut statecot_core::model::NoClock)?)
}
