//! Composed image retrieval laboratory.
//!
//! A toy-scale cross-attention shift encoder trained with a smoothed
//! Recall@K objective and reverse queries, an exact cosine retrieval engine,
//! modality-redundancy analysis, and a VQA-to-retrieval data pipeline.

pub mod datasets;
pub mod explain;
pub mod image;
pub mod metrics;
pub mod model;
pub mod redundancy;
pub mod retrieval;
pub mod rng;
pub mod roaming;
pub mod tensor;
pub mod training;
