use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::runtime::{Branch, EmbeddingSource, RuntimeOptions};
use super::weights::{Group, Model};
use crate::attention::{segmented_mask, validate_spans, SegmentedMask, Span};
use crate::error::{contract, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::reasoning::alpha_schedule;

/// Where the prompt ends and how the rest splits into steps; the last span
/// is the answer region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub prompt_len: usize,
    pub spans: Vec<Span>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.spans.last().map_or(self.prompt_len, |s| s.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions whose next token is predicted by the losses: from the last
    /// prompt token to the second-to-last token.
    pub fn target_rows(&self) -> core::ops::Range<usize> {
        self.prompt_len - 1..self.len() - 1
    }
}

pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

pub struct AdapterVars {
    pub q_down: Var,
    pub q_up: Var,
    pub k_down: Var,
    pub k_up: Var,
    pub v_down: Var,
    pub v_up: Var,
    pub g_down: Var,
    pub g_up: Var,
    pub g_bias: Var,
}

/// Tape handles for every parameter, plus the named subset that receives
/// gradients.
pub struct ParamVars {
    pub embed: Var,
    pub marker_embed: Var,
    pub final_norm: Var,
    pub head: Var,
    pub layers: Vec<LayerVars>,
    pub adapters: Vec<AdapterVars>,
    pub trainable: Vec<(String, Var)>,
}

/// Puts every parameter on the tape; members of `trainable` become
/// gradient-tracking leaves, the rest constants.
pub fn register_params(tape: &mut Tape, model: &Model, trainable: Option<Group>) -> ParamVars {
    let mut all = Vec::new();
    let mut named = Vec::new();
    for (name, group, t) in model.params() {
        let v = if Some(group) == trainable {
            let v = tape.leaf(t.clone().with_grad(true));
            named.push((name, v));
            v
        } else {
            tape.constant(t.clone())
        };
        all.push(v);
    }
    let mut it = all.into_iter();
    let mut next = || it.next().expect("parameter order");
    let embed = next();
    let final_norm = next();
    let head = next();
    let layers = (0..model.layers.len())
        .map(|_| LayerVars {
            attn_norm: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ffn_norm: next(),
            w_gate: next(),
            w_up: next(),
            w_down: next(),
        })
        .collect();
    let marker_embed = next();
    let adapters = (0..model.adapters.len())
        .map(|_| AdapterVars {
            q_down: next(),
            q_up: next(),
            k_down: next(),
            k_up: next(),
            v_down: next(),
            v_up: next(),
            g_down: next(),
            g_up: next(),
            g_bias: next(),
        })
        .collect();
    ParamVars {
        embed,
        marker_embed,
        final_norm,
        head,
        layers,
        adapters,
        trainable: named,
    }
}

fn norm_gain(tape: &mut Tape, x: Var, gain: Var, eps: f64) -> Result<Var> {
    let n = tape.rms_norm(x, eps);
    tape.mul_row(n, gain)
}

fn low_rank(tape: &mut Tape, a: Var, base: Var, down: Var, up: Var, scale: f64) -> Result<Var> {
    let b = tape.matmul(a, base)?;
    let z = tape.matmul(a, down)?;
    let d = tape.matmul(z, up)?;
    let d = tape.scale(d, scale);
    tape.add(b, d)
}

/// Linear attention over a whole sequence in chunks: the prompt first, then
/// one chunk per span. Inside a chunk each row reads the state carried in
/// plus a strictly-lower-triangular sum over earlier rows of the chunk;
/// between chunks the state absorbs the chunk's `KᵀV`, blended with the
/// running mean of earlier step deltas when correction is on.
fn chunked_linear_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    layout: &SequenceLayout,
    opts: &RuntimeOptions,
) -> Result<Var> {
    let dh = tape.value(q).cols();
    let mut regions = vec![Span::new(0, layout.prompt_len)];
    regions.extend_from_slice(&layout.spans);
    let mut state = tape.constant(Tensor::zeros(&[dh, dh]));
    let mut global = state;
    let mut outs = Vec::with_capacity(regions.len());
    for (r, span) in regions.iter().enumerate() {
        let len = span.len();
        let qr = tape.slice_rows(q, span.start, len)?;
        let kr = tape.slice_rows(k, span.start, len)?;
        let vr = tape.slice_rows(v, span.start, len)?;
        let inter = tape.matmul(qr, state)?;
        let scores = tape.matmul_nt(qr, kr)?;
        let lower: Vec<f64> = (0..len * len)
            .map(|ij| if ij % len < ij / len { 1.0 } else { 0.0 })
            .collect();
        let scores = tape.mul_const(scores, Arc::new(lower))?;
        let intra = tape.matmul(scores, vr)?;
        outs.push(tape.add(inter, intra)?);
        if r + 1 == regions.len() {
            break;
        }
        let raw = tape.matmul_tn(kr, vr)?;
        if r == 0 || !opts.correction.enabled {
            state = tape.add(state, raw)?;
        } else {
            let t = r;
            let alpha = alpha_schedule(t, &opts.correction)?;
            let keep = tape.scale(raw, 1.0 - alpha);
            let pull = tape.scale(global, alpha);
            let blended = tape.add(keep, pull)?;
            state = tape.add(state, blended)?;
            let w = 1.0 / t as f64;
            let g_old = tape.scale(global, 1.0 - w);
            let g_new = tape.scale(raw, w);
            global = tape.add(g_old, g_new)?;
        }
    }
    tape.concat_rows(&outs)
}

/// Logits (`n × vocab`) for a whole sequence in one pass. With eviction on
/// the softmax branch uses the segmented mask and step-local positions, as
/// generation does; otherwise an ordinary causal mask and absolute
/// positions.
pub fn forward_logits(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    tokens: &[usize],
    layout: &SequenceLayout,
    opts: &RuntimeOptions,
    source: EmbeddingSource,
) -> Result<Var> {
    let cfg = &model.config;
    let n = tokens.len();
    if layout.prompt_len == 0 || layout.len() != n {
        return Err(contract!("layout covers {} of {} tokens", layout.len(), n));
    }
    validate_spans(layout.prompt_len, &layout.spans)?;
    if n > cfg.context_limit {
        return Err(crate::error::Error::ContextLimit {
            len: n,
            limit: cfg.context_limit,
        });
    }
    let p = layout.prompt_len;
    let (mask, positions) = if opts.evict {
        let mut pos: Vec<usize> = (0..p).collect();
        for s in &layout.spans {
            pos.extend((0..s.len()).map(|j| p + j));
        }
        (segmented_mask(p, &layout.spans)?, pos)
    } else {
        (SegmentedMask::causal(n), (0..n).collect())
    };
    let positions = Arc::new(positions);
    let eps = cfg.norm_eps;
    let dh = cfg.d_head();
    let inv_sqrt = 1.0 / libm::sqrt(dh as f64);

    let table = match source {
        EmbeddingSource::Base => vars.embed,
        EmbeddingSource::Markers => {
            let base = tape.slice_rows(vars.embed, 0, cfg.base_vocab)?;
            tape.concat_rows(&[base, vars.marker_embed])?
        }
    };
    let mut x = tape.gather_rows(table, Arc::new(tokens.to_vec()))?;
    for (lw, aw) in vars.layers.iter().zip(&vars.adapters) {
        let a = norm_gain(tape, x, lw.attn_norm, eps)?;
        let q = tape.matmul(a, lw.wq)?;
        let k = tape.matmul(a, lw.wk)?;
        let v = tape.matmul(a, lw.wv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let mut qh = tape.slice_cols(q, h * dh, dh)?;
            let mut kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            if let Some(base) = cfg.rope_base() {
                qh = tape.rope(qh, positions.clone(), base)?;
                kh = tape.rope(kh, positions.clone(), base)?;
            }
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, inv_sqrt);
            let pr = tape.masked_softmax(s, mask.as_slice())?;
            heads.push(tape.matmul(pr, vh)?);
        }
        let mut mixed = tape.concat_cols(&heads)?;
        if opts.branch != Branch::Off {
            let lq = low_rank(tape, a, lw.wq, aw.q_down, aw.q_up, cfg.lora_scale)?;
            let lk = low_rank(tape, a, lw.wk, aw.k_down, aw.k_up, cfg.lora_scale)?;
            let lv = low_rank(tape, a, lw.wv, aw.v_down, aw.v_up, cfg.lora_scale)?;
            let mut la = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = tape.slice_cols(lq, h * dh, dh)?;
                let kh = tape.slice_cols(lk, h * dh, dh)?;
                let vh = tape.slice_cols(lv, h * dh, dh)?;
                la.push(chunked_linear_attention(tape, qh, kh, vh, layout, opts)?);
            }
            let o = tape.concat_cols(&la)?;
            let gated = match opts.branch {
                Branch::Fixed(g) => tape.mul_const(o, Arc::new(vec![g; n * cfg.d_model]))?,
                _ => {
                    let z = tape.matmul(a, aw.g_down)?;
                    let z = tape.matmul(z, aw.g_up)?;
                    let z = tape.scale(z, cfg.gate_scale);
                    let z = tape.add_row(z, aw.g_bias)?;
                    let g = tape.sigmoid(z);
                    tape.mul(g, o)?
                }
            };
            mixed = tape.add(gated, mixed)?;
        }
        let out = tape.matmul(mixed, lw.wo)?;
        x = tape.add(x, out)?;
        let f = norm_gain(tape, x, lw.ffn_norm, eps)?;
        let g = tape.matmul(f, lw.w_gate)?;
        let g = tape.silu(g);
        let u = tape.matmul(f, lw.w_up)?;
        let gu = tape.mul(g, u)?;
        let down = tape.matmul(gu, lw.w_down)?;
        x = tape.add(x, down)?;
    }
    let h = norm_gain(tape, x, vars.final_norm, eps)?;
    tape.matmul(h, vars.head)
}
