//! Incomplete multimodal video–text retrieval: feature completion, knowledge
//! distillation and multi-granularity integration on a shared embedding.

pub mod approx;
pub mod dataset;
pub mod distill;
pub mod integrate;
pub mod ops;
pub mod seed;
pub mod similarity;
pub mod model;
pub mod gradcheck;
pub mod train;
pub mod eval;
