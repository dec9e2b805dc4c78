use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Positional {
    Rope { base: f64 },
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Ordinary vocabulary, including the answer and end-of-sequence markers.
    pub base_vocab: usize,
    pub answer_token: usize,
    pub eos_token: usize,
    /// Number of reasoning patterns; each adds a start and an end token.
    pub n_patterns: usize,
    pub t_max: usize,
    pub context_limit: usize,
    pub positional: Positional,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub gate_rank: usize,
    pub gate_scale: f64,
    pub gate_bias_init: f64,
    /// Longest step in tokens, markers included.
    pub max_step_len: usize,
    pub max_answer_len: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 128,
            base_vocab: 32,
            answer_token: 1,
            eos_token: 2,
            n_patterns: 4,
            t_max: 40,
            context_limit: 1024,
            positional: Positional::Rope { base: 10_000.0 },
            lora_rank: 8,
            lora_scale: 1.0,
            gate_rank: 4,
            gate_scale: 1.0,
            gate_bias_init: 0.0,
            max_step_len: 256,
            max_answer_len: 16,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Small configuration with `d_ff = 4·d_model`.
    pub fn tiny(n_layers: usize, d_model: usize, n_heads: usize, base_vocab: usize, n_patterns: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff: 4 * d_model,
            base_vocab,
            n_patterns,
            ..Self::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn vocab(&self) -> usize {
        self.base_vocab + 2 * self.n_patterns
    }

    pub fn rope_base(&self) -> Option<f64> {
        match self.positional {
            Positional::Rope { base } => Some(base),
            Positional::None => None,
        }
    }

    pub fn tokens(&self) -> SpecialTokenTable {
        SpecialTokenTable {
            base_vocab: self.base_vocab,
            n_patterns: self.n_patterns,
            answer: self.answer_token,
            eos: self.eos_token,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(contract!(
                "d_model {} not divisible into {} heads",
                self.d_model,
                self.n_heads
            ));
        }
        if self.d_head() % 2 != 0 && self.rope_base().is_some() {
            return Err(contract!("rotary embedding needs an even head width"));
        }
        if self.answer_token >= self.base_vocab || self.eos_token >= self.base_vocab || self.answer_token == self.eos_token {
            return Err(contract!("answer/eos tokens must be distinct ordinary tokens"));
        }
        if self.n_patterns == 0 || self.t_max == 0 || self.max_step_len < 3 || self.context_limit == 0 {
            return Err(contract!("degenerate limits in {:?}", self));
        }
        if self.lora_rank == 0 || self.gate_rank == 0 {
            return Err(contract!("adapter ranks must be positive"));
        }
        Ok(())
    }
}

/// Token ids of the reasoning markers. Pattern `c` (1-based) owns the pair
/// `base_vocab + 2(c−1)` (start) and `base_vocab + 2(c−1) + 1` (end).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokenTable {
    pub base_vocab: usize,
    pub n_patterns: usize,
    pub answer: usize,
    pub eos: usize,
}

impl SpecialTokenTable {
    pub fn start(&self, pattern: usize) -> usize {
        debug_assert!((1..=self.n_patterns).contains(&pattern));
        self.base_vocab + 2 * (pattern - 1)
    }

    pub fn end(&self, pattern: usize) -> usize {
        self.start(pattern) + 1
    }

    pub fn vocab(&self) -> usize {
        self.base_vocab + 2 * self.n_patterns
    }

    pub fn is_special(&self, tok: usize) -> bool {
        tok >= self.base_vocab && tok < self.vocab()
    }

    /// Pattern whose start token is `tok`.
    pub fn start_pattern(&self, tok: usize) -> Option<usize> {
        (self.is_special(tok) && (tok - self.base_vocab) % 2 == 0).then(|| (tok - self.base_vocab) / 2 + 1)
    }

    /// Pattern whose end token is `tok`.
    pub fn end_pattern(&self, tok: usize) -> Option<usize> {
        (self.is_special(tok) && (tok - self.base_vocab) % 2 == 1).then(|| (tok - self.base_vocab) / 2 + 1)
    }
}
