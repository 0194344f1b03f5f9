//! Non-autoregressive translation with an explicit reordering module.
//!
//! A source sentence is first rewritten into a *pseudo-translation* (its own
//! words placed in target order) by a small reordering module, and a
//! non-autoregressive decoder then translates every position in parallel
//! while attending to that guide.

pub mod align;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod train;

pub use error::{Error, Result};
