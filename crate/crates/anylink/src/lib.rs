//! Entity linking against knowledge bases whose schema and entities were
//! never seen during training. Entities with arbitrary attribute-value pairs
//! are flattened into encoder-ready strings using learned attribute-separator
//! tokens, then linked with a bi-encoder candidate generator and a
//! cross-encoder reranker.

pub mod eval;
pub mod encoder;
pub mod ingest;
pub mod kb;
pub mod nn;
pub mod retrieval;
pub mod serialize;
pub mod tokenizer;
pub mod training;
