//! Step-structured reasoning runtime built on a mixed attention block.
//!
//! Each layer pairs softmax attention restricted to the prompt and the
//! current reasoning step with a linear-attention state that summarises all
//! completed steps. The crate is `no_std` with `alloc`; file formats, timing
//! and the command line live in the `statecot` companion crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod error;
pub mod attention;
pub mod bench;
pub mod corpus;
pub mod numerics;
pub mod model;
pub mod reasoning;
pub mod training;

pub use error::{Error, Result};
