//! Restricted softmax attention, the linear-attention reasoning state, and
//! their gated combination.

mod cache;
mod kernelized;
mod mam;
mod mask;
mod projections;
mod state;

pub use cache::{KVCache, LayerCache, Segment};
pub use kernelized::{elu_plus_one, kernel_attention_pairwise, kernel_attention_state};
pub use mam::{AttnStats, LaBranch, MamLayer};
pub use mask::{segmented_mask, validate_spans, SegmentedMask, Span};
pub use projections::{GateParams, LowRankDelta, ProjectionSet};
pub use state::{inner_product_objective_grad, ttt_update, StateMatrix};
