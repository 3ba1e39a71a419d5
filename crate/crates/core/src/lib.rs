//! Hierarchical graph reasoning for fine-grained video-text retrieval.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod matching;
pub mod model;
pub mod pipeline;
pub mod semantic_graph;
pub mod synth;
pub mod text_encoder;
pub mod trainer;
pub mod video_encoder;
