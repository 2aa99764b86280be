//! Retrieval and prompt-composition laboratory for measuring how the type,
//! number and position of context documents affect RAG answer accuracy.

pub mod corpus;
pub mod dense;
pub mod eval;
pub mod experiment;
pub mod gateway;
pub mod prompt;
pub mod ranking;
pub mod seeds;
pub mod sparse;
pub mod taxonomy;
