use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::SpecialTokenTable;
use super::runtime::{GenerationContext, InferenceModel, RuntimeOptions};
use crate::attention::Segment;
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::reasoning::StepReport;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodePolicy {
    Greedy,
    Nucleus { temperature: f64, top_p: f64, seed: u64 },
}

impl Default for DecodePolicy {
    fn default() -> Self {
        DecodePolicy::Greedy
    }
}

impl DecodePolicy {
    pub fn sampling(seed: u64) -> Self {
        DecodePolicy::Nucleus {
            temperature: 0.6,
            top_p: 0.95,
            seed,
        }
    }
}

/// Wall clock supplied by the caller; the core crate has none.
pub trait Clock {
    fn now_ms(&mut self) -> f64;
}

pub struct NoClock;

impl Clock for NoClock {
    fn now_ms(&mut self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub policy: DecodePolicy,
    /// Forbid reopening the previous step's pattern.
    pub diversity: bool,
    pub runtime: RuntimeOptions,
    /// Overrides the configured step cap.
    pub max_steps: Option<usize>,
    /// Forces a step to close once it reaches this many tokens, markers
    /// included; defaults to the configured per-step limit.
    pub step_cap: Option<usize>,
    /// Stop after this many tokens in total instead of generating an answer.
    pub stop_at: Option<usize>,
}

impl GenerateOptions {
    pub fn new(runtime: RuntimeOptions) -> Self {
        Self {
            policy: DecodePolicy::Greedy,
            diversity: true,
            runtime,
            max_steps: None,
            step_cap: None,
            stop_at: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub pattern: usize,
    pub tokens: Vec<usize>,
    pub step_index: usize,
    pub alpha: f64,
    pub raw_delta_norm: f64,
    pub reward: Option<f64>,
    pub cache_peak: usize,
    pub ms: f64,
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt: Vec<usize>,
    pub steps: Vec<TraceStep>,
    /// Answer tokens after the answer marker, without the end marker.
    pub answer: Vec<usize>,
    pub flags: Vec<String>,
    #[serde(default)]
    pub peak_cache: usize,
    #[serde(default)]
    pub macs: u64,
}

impl GenerationTrace {
    /// Full token sequence: prompt, steps, answer marker, answer.
    pub fn tokens(&self, table: &SpecialTokenTable) -> Vec<usize> {
        let mut out = self.prompt.clone();
        for s in &self.steps {
            out.extend_from_slice(&s.tokens);
        }
        out.push(table.answer);
        out.extend_from_slice(&self.answer);
        out
    }

    /// Checks that every step opens with a start marker and closes with the
    /// matching end marker, with no markers inside.
    pub fn is_well_formed(&self, table: &SpecialTokenTable) -> bool {
        self.steps.iter().all(|s| {
            let n = s.tokens.len();
            n >= 2
                && table.start_pattern(s.tokens[0]) == Some(s.pattern)
                && table.end_pattern(s.tokens[n - 1]) == Some(s.pattern)
                && s.tokens[1..n - 1].iter().all(|&t| !table.is_special(t))
        }) && self.answer.iter().all(|&t| !table.is_special(t) && t != table.answer)
    }
}

/// Removes the start token of `prev` from the candidates at a step opening.
pub fn diversity_filter<T: Real>(prev: Option<usize>, logits: &mut [T], table: &SpecialTokenTable) {
    if let Some(p) = prev {
        logits[table.start(p)] = T::neg_infinity();
    }
}

/// Picks a token among those with finite logits.
pub fn choose<T: Real>(logits: &[T], policy: DecodePolicy, rng: &mut ChaCha8Rng) -> usize {
    match policy {
        DecodePolicy::Greedy => argmax(logits),
        DecodePolicy::Nucleus { temperature, top_p, .. } => {
            if temperature <= 0.0 {
                return argmax(logits);
            }
            let mut cand: Vec<(usize, f64)> = logits
                .iter()
                .enumerate()
                .filter(|(_, l)| l.is_finite())
                .map(|(i, l)| (i, Real::to_f64(*l) / temperature))
                .collect();
            let m = cand.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in cand.iter_mut() {
                c.1 = libm::exp(c.1 - m);
                z += c.1;
            }
            cand.iter_mut().for_each(|c| c.1 /= z);
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut mass = 0.0;
            let mut keep = 0;
            for c in &cand {
                mass += c.1;
                keep += 1;
                if mass >= top_p {
                    break;
                }
            }
            cand.truncate(keep);
            let mut u = rng.random::<f64>() * mass;
            for c in &cand {
                if u < c.1 {
                    return c.0;
                }
                u -= c.1;
            }
            cand[keep - 1].0
        }
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

fn mask_except<T: Real>(logits: &mut [T], allowed: impl Fn(usize) -> bool) {
    for (i, l) in logits.iter_mut().enumerate() {
        if !allowed(i) {
            *l = T::neg_infinity();
        }
    }
}

/// A completed step.
pub struct StepOutcome<T> {
    pub pattern: usize,
    pub tokens: Vec<usize>,
    pub report: StepReport<T>,
    pub cache_peak: usize,
    pub truncated: bool,
    /// Logits after the end marker, used to open the next step.
    pub next_logits: Vec<T>,
}

impl<T: Real> InferenceModel<T> {
    /// Opens a step with `start` (a start marker), generates its body until
    /// the matching end marker or the per-step cap, then closes it.
    pub fn step_generate(
        &self,
        ctx: &mut GenerationContext<T>,
        start: usize,
        policy: DecodePolicy,
        cap: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutcome<T>> {
        let table = self.tokens();
        let pattern = table
            .start_pattern(start)
            .ok_or_else(|| crate::error::contract!("token {start} is not a start marker"))?;
        let end = table.end(pattern);
        self.begin_step(ctx)?;
        let mut tokens = alloc::vec![start];
        let mut logits = self.forward_token(ctx, start, Segment::Step)?;
        let mut truncated = false;
        loop {
            let next = if tokens.len() + 1 >= cap {
                truncated = true;
                end
            } else {
                mask_except(&mut logits, |i| {
                    i == end || (i < table.base_vocab && i != table.answer && i != table.eos)
                });
                choose(&logits, policy, rng)
            };
            tokens.push(next);
            logits = self.forward_token(ctx, next, Segment::Step)?;
            if next == end {
                break;
            }
        }
        let cache_peak = ctx.cache.len();
        let report = self.end_step(ctx)?;
        Ok(StepOutcome {
            pattern,
            tokens,
            report,
            cache_peak,
            truncated,
            next_logits: logits,
        })
    }

    /// Generates steps until the model opens the answer or the step cap is
    /// reached, then the answer until the end marker.
    pub fn generate(&self, prompt: &[usize], opts: &GenerateOptions, clock: &mut dyn Clock) -> Result<GenerationTrace> {
        self.generate_with_prefix(prompt, &[], opts, clock)
    }

    /// Like [`generate`](Self::generate), but first teacher-forces the given
    /// steps (each including its markers) and then continues freely.
    pub fn generate_with_prefix(
        &self,
        prompt: &[usize],
        forced: &[Vec<usize>],
        opts: &GenerateOptions,
        clock: &mut dyn Clock,
    ) -> Result<GenerationTrace> {
        let cfg = self.config();
        let table = cfg.tokens();
        let seed = match opts.policy {
            DecodePolicy::Nucleus { seed, .. } => seed,
            DecodePolicy::Greedy => 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = self.new_context(opts.runtime);
        let mut trace = GenerationTrace {
            prompt: prompt.to_vec(),
            steps: Vec::new(),
            answer: Vec::new(),
            flags: Vec::new(),
            peak_cache: 0,
            macs: 0,
        };
        let max_steps = opts.max_steps.unwrap_or(cfg.t_max);
        let cap = opts.step_cap.unwrap_or(cfg.max_step_len).max(3);
        let mut logits = self.prefill(&mut ctx, prompt)?;
        let mut prev = None;

        let result = (|| -> Result<()> {
            for step in forced {
                let t0 = clock.now_ms();
                let pattern = step
                    .first()
                    .and_then(|&t| table.start_pattern(t))
                    .ok_or_else(|| crate::error::contract!("forced step must open with a start marker"))?;
                self.begin_step(&mut ctx)?;
                for &t in step {
                    logits = self.forward_token(&mut ctx, t, Segment::Step)?;
                }
                let cache_peak = ctx.cache.len();
                let report = self.end_step(&mut ctx)?;
                trace.steps.push(trace_step(pattern, step.clone(), &report, cache_peak, clock.now_ms() - t0, false));
                prev = Some(pattern);
            }
            while trace.steps.len() < max_steps {
                if let Some(limit) = opts.stop_at {
                    if ctx.processed >= limit {
                        trace.flags.push(String::from("stopped"));
                        return Ok(());
                    }
                }
                let mut open = logits.clone();
                mask_except(&mut open, |i| i == table.answer || table.start_pattern(i).is_some());
                if opts.diversity {
                    diversity_filter(prev, &mut open, &table);
                }
                let choice = choose(&open, opts.policy, &mut rng);
                if choice == table.answer {
                    break;
                }
                let t0 = clock.now_ms();
                let out = self.step_generate(&mut ctx, choice, opts.policy, cap, &mut rng)?;
                if out.truncated {
                    trace.flags.push(String::from("step_truncated"));
                }
                trace.steps.push(trace_step(
                    out.pattern,
                    out.tokens,
                    &out.report,
                    out.cache_peak,
                    clock.now_ms() - t0,
                    out.truncated,
                ));
                prev = Some(out.pattern);
                logits = out.next_logits;
            }
            if trace.steps.len() >= max_steps {
                trace.flags.push(String::from("step_limit"));
            }
            self.begin_step(&mut ctx)?;
            logits = self.forward_token(&mut ctx, table.answer, Segment::Step)?;
            loop {
                if trace.answer.len() >= cfg.max_answer_len {
                    trace.flags.push(String::from("answer_truncated"));
                    break;
                }
                mask_except(&mut logits, |i| i < table.base_vocab && i != table.answer);
                let next = choose(&logits, opts.policy, &mut rng);
                if next == table.eos {
                    break;
                }
                trace.answer.push(next);
                logits = self.forward_token(&mut ctx, next, Segment::Step)?;
            }
            Ok(())
        })();
        match result {
            Ok(()) => {}
            Err(Error::ContextLimit { .. }) => trace.flags.push(String::from("context_limit")),
            Err(e) => return Err(e),
        }
        trace.peak_cache = ctx.peak_cache;
        trace.macs = ctx.stats.macs;
        Ok(trace)
    }
}

fn trace_step<T: Real>(
    pattern: usize,
    tokens: Vec<usize>,
    report: &StepReport<T>,
    cache_peak: usize,
    ms: f64,
    truncated: bool,
) -> TraceStep {
    TraceStep {
        pattern,
        tokens,
        step_index: report.step_index,
        alpha: report.alpha,
        raw_delta_norm: report.raw_delta_norm,
        reward: report.reward,
        cache_peak,
        ms,
        truncated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn diversity_filter_masks_only_previous_start() {
        let table = SpecialTokenTable {
            base_vocab: 4,
            n_patterns: 2,
            answer: 1,
            eos: 2,
        };
        let mut l = [0.0f64, 0.1, 0.2, 0.3, 5.0, 0.0, 4.0, 0.0];
        diversity_filter(None, &mut l, &table);
        assert_eq!(argmax(&l), 4);
        diversity_filter(Some(1), &mut l, &table);
        assert_eq!(l[4], f64::NEG_INFINITY);
        assert_eq!(argmax(&l), 6);
        assert_eq!(&l[..4], &[0.0, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn nucleus_respects_mask_and_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = [f64::NEG_INFINITY, 10.0, 0.0, f64::NEG_INFINITY];
        let p = DecodePolicy::Nucleus {
            temperature: 1.0,
            top_p: 0.9,
            seed: 0,
        };
        for _ in 0..200 {
            assert_eq!(choose(&l, p, &mut rng), 1);
        }
        let flat = [0.0f64; 4];
        let mut seen = [0usize; 4];
        for _ in 0..400 {
            seen[choose(&flat, DecodePolicy::sampling(0), &mut rng)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 50));
    }
}
