//! Deterministic generation driver and closed-form attention cost for the
//! latency/memory sweep. Timing lives with the caller.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::Segment;
use crate::error::{contract, Result};
use crate::model::{argmax, InferenceModel, ModelConfig, RuntimeOptions};
use crate::numerics::Real;
use crate::reasoning::CorrectionConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    /// Step-local softmax attention plus the reasoning state, with eviction.
    Mam,
    /// Plain causal transformer holding every position in the cache.
    Baseline,
}

impl BenchMode {
    pub const ALL: [BenchMode; 2] = [BenchMode::Baseline, BenchMode::Mam];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Mam => "mam",
            BenchMode::Baseline => "baseline",
        }
    }

    pub fn runtime(self) -> RuntimeOptions {
        match self {
            BenchMode::Mam => RuntimeOptions::reasoning(CorrectionConfig::default()),
            BenchMode::Baseline => RuntimeOptions::vanilla(),
        }
    }
}

/// Fixed prompt followed by steps of exactly `step_len` tokens (markers
/// included), the last one cut short at the target length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub prompt_len: usize,
    pub step_len: usize,
}

impl Schedule {
    pub fn validate(&self, context_len: usize) -> Result<()> {
        if self.prompt_len == 0 || self.step_len < 2 || context_len <= self.prompt_len {
            return Err(contract!("schedule {:?} cannot reach context {context_len}", self));
        }
        Ok(())
    }

    /// Cache length seen by each processed token (after its own entry is
    /// pushed).
    fn cache_lengths(&self, context_len: usize, mode: BenchMode) -> impl Iterator<Item = usize> + '_ {
        let p = self.prompt_len;
        let s = self.step_len;
        (0..context_len).map(move |i| match mode {
            BenchMode::Baseline => i + 1,
            BenchMode::Mam if i < p => i + 1,
            BenchMode::Mam => p + (i - p) % s + 1,
        })
    }
}

/// Attention multiply-accumulates for driving a model to `context_len`
/// tokens: `2·n·d_model` per layer for softmax attention over `n` cached
/// positions, plus `2·H·d_head²` per layer for the state read and update.
pub fn flop_count(config: &ModelConfig, context_len: usize, mode: BenchMode, schedule: Schedule) -> u64 {
    let l = config.n_layers as u64;
    let w = config.d_model as u64;
    let sa: u64 = schedule.cache_lengths(context_len, mode).map(|n| 2 * n as u64 * w).sum();
    let la = match mode {
        BenchMode::Mam => 2 * (config.n_heads * config.d_head() * config.d_head()) as u64 * context_len as u64,
        BenchMode::Baseline => 0,
    };
    l * (sa + la)
}

/// Peak number of cached positions for the schedule.
pub fn cache_peak(context_len: usize, mode: BenchMode, schedule: Schedule) -> usize {
    schedule.cache_lengths(context_len, mode).max().unwrap_or(0)
}

/// Bytes per cached position: one key and one value row per layer.
pub fn cache_bytes_per_position<T: Real>(config: &ModelConfig) -> usize {
    2 * config.n_layers * config.d_model * core::mem::size_of::<T>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DriveReport {
    pub tokens: usize,
    pub peak_cache: usize,
    pub macs: u64,
}

/// Greedily generates body tokens under the schedule until `context_len`
/// tokens have been processed. Steps open and close with marker 1.
pub fn drive<T: Real>(model: &InferenceModel<T>, mode: BenchMode, schedule: Schedule, context_len: usize) -> Result<DriveReport> {
    schedule.validate(context_len)?;
    let cfg = model.config();
    if context_len > cfg.context_limit {
        return Err(crate::error::Error::ContextLimit {
            len: context_len,
            limit: cfg.context_limit,
        });
    }
    let table = cfg.tokens();
    let body = 3..table.base_vocab;
    if body.is_empty() {
        return Err(contract!("no body tokens to generate"));
    }
    let mut ctx = model.new_context(mode.runtime());
    let prompt: Vec<usize> = (0..schedule.prompt_len).map(|i| body.start + i % body.len()).collect();
    let mut logits = model.prefill(&mut ctx, &prompt)?;
    let mut done = schedule.prompt_len;
    while done < context_len {
        let len = schedule.step_len.min(context_len - done);
        model.begin_step(&mut ctx)?;
        for j in 0..len {
            let tok = if j == 0 {
                table.start(1)
            } else if j + 1 == schedule.step_len {
                table.end(1)
            } else {
                body.start + argmax(&logits[body.clone()])
            };
            logits = model.forward_token(&mut ctx, tok, Segment::Step)?;
        }
        model.end_step(&mut ctx)?;
        done += len;
    }
    Ok(DriveReport {
        tokens: ctx.processed,
        peak_cache: ctx.peak_cache,
        macs: ctx.stats.macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_context_scales_cost() {
        let cfg = ModelConfig::tiny(4, 128, 4, 64, 4);
        let s = Schedule {
            prompt_len: 16,
            step_len: 64,
        };
        for c in [1024, 2048, 4096] {
            let b = flop_count(&cfg, 2 * c, BenchMode::Baseline, s) as f64 / flop_count(&cfg, c, BenchMode::Baseline, s) as f64;
            let m = flop_count(&cfg, 2 * c, BenchMode::Mam, s) as f64 / flop_count(&cfg, c, BenchMode::Mam, s) as f64;
            // prompt and partial-step terms keep the ratios slightly off the exact powers
            assert!((b - 4.0).abs() < 0.02, "{b}");
            assert!((m - 2.0).abs() < 0.02, "{m}");
        }
    }

    #[test]
    fn peaks() {
        let s = Schedule {
            prompt_len: 10,
            step_len: 8,
        };
        for c in [20, 100, 1000] {
            assert_eq!(cache_peak(c, BenchMode::Baseline, s), c);
            assert_eq!(cache_peak(c, BenchMode::Mam, s), 18);
        }
        assert_eq!(cache_peak(13, BenchMode::Mam, s), 13);
    }
}
