//! Synthetic tri-modal benchmark.

mod analysis;
mod experiment;
mod world;

pub use analysis::{
    gate_records, k_sweep, membership_records, GateRecord, MembershipRecord, K_SWEEP,
};
pub use experiment::{
    encode, evaluate_model, rows_of, run_experiment, token_similarity, token_view, train,
    AlignmentConfig, Encoded, ExperimentOutcome, ModelParams, TokenView, TraceStep, TrainConfig,
    Variant,
};
pub use world::{generate, Modality, ModalitySamples, ScenarioConfig, SyntheticWorld};
