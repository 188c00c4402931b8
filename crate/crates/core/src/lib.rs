//! Lexically constrained text generation by iterative edit refinement.
//!
//! An encoder labels every token of a partial sentence as copy, replace or
//! insert-before; a decoder then fills all resulting mask slots in one
//! parallel pass. Repeating the cycle grows a sentence around the given
//! keywords, which are never replaced.

pub mod cli;
pub mod config;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod synthesis;
pub mod text;
pub mod training;
