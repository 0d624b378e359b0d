//! Retrieval over transformed reasoning traces.
//!
//! The crate covers the offline pipeline end to end: loading and
//! decontaminating a trace corpus, rewriting traces into compact units with
//! a chat model, embedding units into a flat index, answering benchmark
//! queries with retrieved examples, and grading and costing the results.

pub mod config;
pub mod corpus;
pub mod decontam;
pub mod eval;
pub mod exec;
pub mod hash;
pub mod llm;
pub mod pipeline;
pub mod rag;
pub mod retrieval;
pub mod tokenize;
pub mod transform;
