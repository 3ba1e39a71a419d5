//! Seeded desk-scale world with a controlled caption grammar, factor-coded
//! frame features and caption perturbations.

mod bench;
pub mod grammar;
mod perturb;
mod world;

pub use bench::{build_binary_benchmark, BinaryBenchmark, Triplet};
pub use grammar::{CaptionPlan, SyntheticGrammar};
pub use perturb::{perturb, perturb_plan, PerturbKind, PerturbOutcome, Perturbed};
pub use world::{
    generate_world, generate_world_with, render_features, video_id, FactorCodes, LatentClause,
    LatentScene, Splits, SyntheticCaption, SyntheticDataset, SyntheticVideo, WorldConfig,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid grammar: {0}")]
    Grammar(String),
    #[error("infeasible world configuration: {0}")]
    Config(String),
}
