use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, SpecialTokenTable};
use super::weights::Model;
use crate::attention::{
    AttnStats, GateParams, KVCache, LaBranch, LowRankDelta, MamLayer, ProjectionSet, Segment, StateMatrix,
};
use crate::error::{contract, Error, Result};
use crate::numerics::{rms_norm, silu, Matrix, Real, RopeTable};
use crate::reasoning::{CorrectionConfig, StepLedger, StepReport};

/// Which table supplies the marker-token embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingSource {
    /// The frozen rows of the base embedding.
    Base,
    /// The trainable marker table.
    Markers,
}

/// How a context runs the mixed block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeOptions {
    pub branch: Branch,
    /// Clear the step segment when a step closes. Step positions restart at
    /// the prompt length when on, and are absolute when off.
    pub evict: bool,
    pub correction: CorrectionConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Branch {
    Gated,
    Fixed(f64),
    Off,
}

impl RuntimeOptions {
    pub fn reasoning(correction: CorrectionConfig) -> Self {
        Self {
            branch: Branch::Gated,
            evict: true,
            correction,
        }
    }

    /// Gate pinned to zero, full cache, no correction.
    pub fn compat() -> Self {
        Self {
            branch: Branch::Fixed(0.0),
            evict: false,
            correction: CorrectionConfig::disabled(),
        }
    }

    /// Plain softmax attention over the full history.
    pub fn vanilla() -> Self {
        Self {
            branch: Branch::Off,
            evict: false,
            correction: CorrectionConfig::disabled(),
        }
    }

    fn la_branch<T: Real>(&self) -> LaBranch<T> {
        match self.branch {
            Branch::Gated => LaBranch::Gated,
            Branch::Fixed(g) => LaBranch::FixedGate(T::lit(g)),
            Branch::Off => LaBranch::Off,
        }
    }
}

#[derive(Clone, Debug)]
struct RuntimeLayer<T> {
    attn_norm: Vec<T>,
    mam: MamLayer<T>,
    ffn_norm: Vec<T>,
    w_gate: Matrix<T>,
    w_up: Matrix<T>,
    w_down: Matrix<T>,
}

/// Read-only weights for token-by-token decoding in precision `T`.
#[derive(Clone, Debug)]
pub struct InferenceModel<T> {
    config: ModelConfig,
    embed: Matrix<T>,
    layers: Vec<RuntimeLayer<T>>,
    final_norm: Vec<T>,
    head: Matrix<T>,
    rope: Option<RopeTable<T>>,
    eps: T,
}

/// Mutable per-sequence state: cache, reasoning states, step ledger.
#[derive(Clone, Debug)]
pub struct GenerationContext<T> {
    pub options: RuntimeOptions,
    pub cache: KVCache<T>,
    pub states: Vec<StateMatrix<T>>,
    pub ledger: StepLedger<T>,
    pub stats: AttnStats,
    /// Tokens processed so far, prompt included.
    pub processed: usize,
    /// Largest cache occupancy seen.
    pub peak_cache: usize,
}

impl<T: Real> GenerationContext<T> {
    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }
}

fn vec_of<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::lit(x)).collect()
}

impl<T: Real> InferenceModel<T> {
    pub fn new(model: &Model, source: EmbeddingSource) -> Result<Self> {
        let cfg = model.config.clone();
        cfg.validate()?;
        let mut embed = Matrix::<T>::from_tensor(&model.embed);
        if source == EmbeddingSource::Markers {
            let off = cfg.base_vocab * cfg.d_model;
            for (dst, &src) in embed.data[off..].iter_mut().zip(model.marker_embed.data()) {
                *dst = T::lit(src);
            }
        }
        let lora = |down: &crate::numerics::Tensor, up: &crate::numerics::Tensor| LowRankDelta {
            down: Matrix::from_tensor(down),
            up: Matrix::from_tensor(up),
            scale: T::lit(cfg.lora_scale),
        };
        let layers = model
            .layers
            .iter()
            .zip(&model.adapters)
            .map(|(l, a)| {
                let proj = ProjectionSet {
                    wq: Matrix::from_tensor(&l.wq),
                    wk: Matrix::from_tensor(&l.wk),
                    wv: Matrix::from_tensor(&l.wv),
                    wo: Matrix::from_tensor(&l.wo),
                    heads: cfg.n_heads,
                    d_head: cfg.d_head(),
                };
                let la_q = lora(&a.q_down, &a.q_up).effective(&proj.wq);
                let la_k = lora(&a.k_down, &a.k_up).effective(&proj.wk);
                let la_v = lora(&a.v_down, &a.v_up).effective(&proj.wv);
                RuntimeLayer {
                    attn_norm: vec_of(l.attn_norm.data()),
                    mam: MamLayer {
                        proj,
                        la_q,
                        la_k,
                        la_v,
                        gate: GateParams {
                            down: Matrix::from_tensor(&a.g_down),
                            up: Matrix::from_tensor(&a.g_up),
                            bias: vec_of(a.g_bias.data()),
                            scale: T::lit(cfg.gate_scale),
                        },
                    },
                    ffn_norm: vec_of(l.ffn_norm.data()),
                    w_gate: Matrix::from_tensor(&l.w_gate),
                    w_up: Matrix::from_tensor(&l.w_up),
                    w_down: Matrix::from_tensor(&l.w_down),
                }
            })
            .collect();
        Ok(Self {
            rope: cfg
                .rope_base()
                .map(|b| RopeTable::new(cfg.d_head(), cfg.context_limit, b)),
            eps: T::lit(cfg.norm_eps),
            embed,
            layers,
            final_norm: vec_of(model.final_norm.data()),
            head: Matrix::from_tensor(&model.head),
            config: cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokens(&self) -> SpecialTokenTable {
        self.config.tokens()
    }

    pub fn new_context(&self, options: RuntimeOptions) -> GenerationContext<T> {
        let c = &self.config;
        GenerationContext {
            options,
            cache: KVCache::new(c.n_layers, c.d_model),
            states: (0..c.n_layers).map(|_| StateMatrix::zeros(c.n_heads, c.d_head())).collect(),
            ledger: StepLedger::new(c.n_layers, c.n_heads, c.d_head(), options.correction),
            stats: AttnStats::default(),
            processed: 0,
            peak_cache: 0,
        }
    }

    /// Runs one token through every layer, returning the final normalized
    /// hidden vector.
    pub fn forward_hidden(&self, ctx: &mut GenerationContext<T>, token: usize, seg: Segment) -> Result<Vec<T>> {
        let c = &self.config;
        if token >= c.vocab() {
            return Err(contract!("token {token} outside vocabulary of {}", c.vocab()));
        }
        if ctx.processed >= c.context_limit {
            return Err(Error::ContextLimit {
                len: ctx.processed + 1,
                limit: c.context_limit,
            });
        }
        let pos = ctx.cache.prompt_len() + ctx.cache.step_len();
        let d = c.d_model;
        let mut x: Vec<T> = self.embed.data[token * d..(token + 1) * d].to_vec();
        let branch = ctx.options.la_branch::<T>();
        let mut gate_buf = vec![T::zero(); c.d_ff];
        let mut up_buf = vec![T::zero(); c.d_ff];
        for (l, layer) in self.layers.iter().enumerate() {
            let a = rms_norm(&x, &layer.attn_norm, self.eps);
            let att = layer.mam.mam_forward(
                &a,
                &mut ctx.cache,
                &mut ctx.states[l],
                l,
                pos,
                seg,
                self.rope.as_ref(),
                branch,
                &mut ctx.stats,
            )?;
            x.iter_mut().zip(&att).for_each(|(xi, &ai)| *xi = *xi + ai);
            let f = rms_norm(&x, &layer.ffn_norm, self.eps);
            layer.w_gate.vecmat_into(&f, &mut gate_buf);
            layer.w_up.vecmat_into(&f, &mut up_buf);
            for (g, &u) in gate_buf.iter_mut().zip(&up_buf) {
                *g = silu(*g) * u;
            }
            let down = layer.w_down.vecmat(&gate_buf);
            x.iter_mut().zip(&down).for_each(|(xi, &di)| *xi = *xi + di);
        }
        ctx.processed += 1;
        ctx.peak_cache = ctx.peak_cache.max(ctx.cache.len());
        Ok(rms_norm(&x, &self.final_norm, self.eps))
    }

    pub fn logits(&self, hidden: &[T]) -> Vec<T> {
        self.head.vecmat(hidden)
    }

    pub fn forward_token(&self, ctx: &mut GenerationContext<T>, token: usize, seg: Segment) -> Result<Vec<T>> {
        let h = self.forward_hidden(ctx, token, seg)?;
        Ok(self.logits(&h))
    }

    /// Processes the prompt into the prompt segment and the initial states.
    /// Returns the logits after the last prompt token.
    pub fn prefill(&self, ctx: &mut GenerationContext<T>, prompt: &[usize]) -> Result<Vec<T>> {
        if prompt.is_empty() {
            return Err(contract!("empty prompt"));
        }
        if ctx.processed != 0 {
            return Err(contract!("prefill into a used context"));
        }
        if prompt.len() > self.config.context_limit {
            return Err(Error::ContextLimit {
                len: prompt.len(),
                limit: self.config.context_limit,
            });
        }
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.forward_token(ctx, t, Segment::Prompt)?;
        }
        ctx.cache.seal_prompt();
        Ok(logits)
    }

    pub fn begin_step(&self, ctx: &mut GenerationContext<T>) -> Result<()> {
        ctx.ledger.begin_step(&ctx.states)
    }

    /// Applies the step correction, then evicts the step's cache entries
    /// when eviction is on.
    pub fn end_step(&self, ctx: &mut GenerationContext<T>) -> Result<StepReport<T>> {
        let report = ctx.ledger.end_step(&mut ctx.states)?;
        if ctx.options.evict {
            ctx.cache.evict_step();
        }
        Ok(report)
    }

    /// Teacher-forces a prompt and complete steps, returning each step's
    /// report.
    pub fn replay_steps(&self, options: RuntimeOptions, prompt: &[usize], steps: &[&[usize]]) -> Result<Vec<StepReport<T>>> {
        let mut ctx = self.new_context(options);
        self.prefill(&mut ctx, prompt)?;
        let mut out = Vec::with_capacity(steps.len());
        for step in steps {
            self.begin_step(&mut ctx)?;
            for &t in step.iter() {
                self.forward_token(&mut ctx, t, Segment::Step)?;
            }
            out.push(self.end_step(&mut ctx)?);
        }
        Ok(out)
    }

    /// Teacher-forced logits for a prompt followed by closed steps and a
    /// final open span, following the generation-time lifecycle. Row `i` of
    /// the result holds the logits after token `i`.
    pub fn score_spans(
        &self,
        options: RuntimeOptions,
        prompt: &[usize],
        spans: &[&[usize]],
    ) -> Result<Vec<Vec<T>>> {
        let mut ctx = self.new_context(options);
        let mut rows = Vec::new();
        for &t in prompt {
            rows.push(self.forward_token(&mut ctx, t, Segment::Prompt)?);
        }
        ctx.cache.seal_prompt();
        for (i, span) in spans.iter().enumerate() {
            self.begin_step(&mut ctx)?;
            for &t in span.iter() {
                rows.push(self.forward_token(&mut ctx, t, Segment::Step)?);
            }
            if i + 1 < spans.len() {
                self.end_step(&mut ctx)?;
            }
        }
        Ok(rows)
    }
}
