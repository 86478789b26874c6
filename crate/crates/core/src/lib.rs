//! LLM-driven surrogate-user recommendation with attribute-oriented tools.
//!
//! A language-model policy reads a user's history, calls attribute-conditioned
//! retrieval tools (a frozen self-attention backbone plus a per-attribute
//! encoder) and LLM rank tools, validates every returned item against the
//! catalog, and emits a final ranked list.
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example <name>`.

pub mod agent;
pub mod attrtool;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod llm;
pub mod memory;
pub mod nn;
pub mod seqrec;
pub mod synth;
pub mod tools;
