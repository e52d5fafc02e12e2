//! Autoregressive text-to-graph extraction: a transformer encoder-decoder
//! that emits an entity and relation graph as a symbol sequence, pointing
//! into a per-input vocabulary of text spans under a grammar mask.

pub mod decode;
pub mod eval;
pub mod grammar;
pub mod graph;
pub mod introspect;
pub mod io;
pub mod linearize;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vocab;
