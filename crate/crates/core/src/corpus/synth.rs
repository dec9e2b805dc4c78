use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::Vocab;
use super::CoTSample;

/// Words that open every step after the first; each is followed by the first
/// word of a randomly chosen style, which makes its next-token distribution
/// broad.
pub const MARKERS: [&str; 4] = ["Wait", "Hmm", "Alternatively", "Now"];

const STYLE_WORDS: [&[&str]; 6] = [
    &["we", "compute", "which", "that", "gives"],
    &["let", "me", "check", "by", "reversing", ":", "is", "correct"],
    &["maybe", "i", "misread", "the", "question", "?", "no", ",", "it", "asks", "for"],
    &["so", "result", "should", "be", "good"],
    &["start", "at", "and", "move", "steps", "to", "reach", "done"],
    &["roughly", "answer", "near", "fine"],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Number of step styles, 1 to 6.
    pub styles: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    /// Operands are drawn from `0..=max_operand`.
    pub max_operand: u32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            styles: 4,
            min_steps: 2,
            max_steps: 5,
            max_operand: 9,
        }
    }
}

/// A generated sample with the style of each of its steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub sample: CoTSample,
    pub styles: Vec<usize>,
}

fn render(style: usize, a: u32, b: u32, plus: bool) -> String {
    let op = if plus { "plus" } else { "minus" };
    let inv = if plus { "minus" } else { "plus" };
    let c = if plus { a + b } else { a - b };
    match style {
        0 => format!("we compute {a} {op} {b} . that gives {c} ."),
        1 => format!("let me check by reversing : {c} {inv} {b} is {a} . correct ."),
        2 => format!("maybe i misread the question ? no , it asks for {a} {op} {b} ."),
        3 => format!("so the result should be {c} . good ."),
        4 => format!("start at {a} and move {b} steps to reach {c} . done ."),
        _ => format!("roughly the answer is near {c} . fine ."),
    }
}

/// Deterministic arithmetic chain-of-thought samples with known step styles.
pub fn synth_records(seed: u64, n_samples: usize, params: &SynthParams) -> Vec<SynthRecord> {
    let styles = params.styles.clamp(1, STYLE_WORDS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| {
            let plus = rng.random_bool(0.5);
            let mut a = rng.random_range(0..=params.max_operand);
            let mut b = rng.random_range(0..=params.max_operand);
            if !plus && a < b {
                core::mem::swap(&mut a, &mut b);
            }
            let c = if plus { a + b } else { a - b };
            let n_steps = rng.random_range(params.min_steps.max(1)..=params.max_steps.max(params.min_steps.max(1)));
            let mut thinking = String::new();
            let mut chosen: Vec<usize> = Vec::with_capacity(n_steps);
            for s in 0..n_steps {
                let style = loop {
                    let st = rng.random_range(0..styles);
                    if styles == 1 || chosen.last() != Some(&st) {
                        break st;
                    }
                };
                if s > 0 {
                    thinking.push(' ');
                    thinking.push_str(MARKERS.choose(&mut rng).expect("markers"));
                    thinking.push(' ');
                }
                thinking.push_str(&render(style, a, b, plus));
                chosen.push(style);
            }
            SynthRecord {
                sample: CoTSample {
                    query: format!("compute {a} {} {b} .", if plus { "plus" } else { "minus" }),
                    thinking,
                    answer: c.to_string(),
                },
                styles: chosen,
            }
        })
        .collect()
}

pub fn synth_corpus(seed: u64, n_samples: usize, params: &SynthParams) -> Vec<CoTSample> {
    synth_records(seed, n_samples, params).into_iter().map(|r| r.sample).collect()
}

/// Every word the generator can emit, in a fixed order.
pub fn synth_vocab(params: &SynthParams) -> Vocab {
    let mut words: Vec<String> = ["compute", "plus", "minus", ".", "the", "is"].iter().map(|s| s.to_string()).collect();
    words.extend(MARKERS.iter().map(|s| s.to_string()));
    for w in STYLE_WORDS.iter().flat_map(|s| s.iter()) {
        words.push(w.to_string());
    }
    words.extend((0..=2 * params.max_operand).map(|n| n.to_string()));
    Vocab::new(words)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let p = SynthParams::default();
        assert_eq!(synth_corpus(5, 20, &p), synth_corpus(5, 20, &p));
        assert_ne!(synth_corpus(5, 20, &p), synth_corpus(6, 20, &p));
    }

    #[test]
    fn every_word_is_in_vocabulary() {
        let p = SynthParams {
            styles: 6,
            ..SynthParams::default()
        };
        let v = synth_vocab(&p);
        for r in synth_records(1, 300, &p) {
            for text in [&r.sample.query, &r.sample.thinking, &r.sample.answer] {
                assert!(v.encode(text).ids.iter().all(|&i| i != 0), "{text}");
            }
        }
    }

    #[test]
    fn consecutive_styles_differ() {
        for r in synth_records(2, 200, &SynthParams::default()) {
            assert!(r.styles.windows(2).all(|w| w[0] != w[1]));
            assert!((2..=5).contains(&r.styles.len()));
        }
    }
}
