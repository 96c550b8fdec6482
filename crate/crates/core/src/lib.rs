//! kNN-augmented cloze question answering.
//!
//! A text collection is embedded into a datastore of (masked-context embedding, token)
//! records. At query time a TF-IDF retriever picks the relevant documents, an exact
//! nearest-neighbor search over their records yields a token distribution, and that
//! distribution is interpolated with a language model's prediction. An IVF/PQ index
//! supports searching the whole store without the retrieval step.

pub mod ann;
pub mod binio;
pub mod corpus;
pub mod datastore;
pub mod distribution;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod ir;
pub mod kmeans;
pub mod knn;
pub mod pipeline;
pub mod query;

pub use error::{Error, Result};
