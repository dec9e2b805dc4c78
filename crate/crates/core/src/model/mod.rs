//! Decoder-only transformer with mixed attention blocks, its step-structured
//! generation loop, and the differentiable forward used for training.

mod config;
mod generate;
mod runtime;
mod tape_forward;
mod weights;

pub use config::{ModelConfig, Positional, SpecialTokenTable};
pub use generate::{
    argmax, choose, diversity_filter, Clock, DecodePolicy, GenerateOptions, GenerationTrace, NoClock, StepOutcome,
    TraceStep,
};
pub use runtime::{Branch, EmbeddingSource, GenerationContext, InferenceModel, RuntimeOptions};
pub use tape_forward::{forward_logits, register_params, ParamVars, AdapterVars, LayerVars, SequenceLayout};
pub use weights::{AdapterWeights, Group, LayerWeights, Model};
