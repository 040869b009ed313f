//! Data-to-text generation with an explicit sentence plan.
//!
//! A hidden Markov model over facts: each hidden state is an ordered group of
//! input predicates, transitions are masked softmaxes over the predicates of
//! the input, and each fact is emitted by a Transformer decoder that only
//! attends to the triples of its state. Training sums over plans with a
//! backward recursion; generation searches plans, then decodes.
//!
//! The guide in `book/` walks through each module.

pub mod error;
pub mod numeric;

pub use error::{Error, Result};
pub mod config;
pub mod data;
pub mod emission;
pub mod eval;
pub mod inference;
pub mod model;
pub mod plan;
pub mod segment;
pub mod synth;
pub mod training;
pub mod transition;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/plans.md")]
    mod plans {}
    #[doc = include_str!("../../../book/src/transitions.md")]
    mod transitions {}
    #[doc = include_str!("../../../book/src/emission.md")]
    mod emission {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/generation.md")]
    mod generation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
