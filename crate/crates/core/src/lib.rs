//! Cognitive-representation correction for knowledge tracing.
//!
//! The crate is organised as a pipeline:
//!
//! - [`ingest`]: interaction logs (ASSIST-style CSV, JSON lines) into per-student sequences
//! - [`stats`]: question difficulty, interval performance and same-skill subsequences
//! - [`detect`]: the four coherence/continuity predicates and the control value
//! - [`dpopt`]: the discrete optimal-correction solver with subregion partitioning
//! - [`pretrain`]: question/skill embeddings trained on the bipartite relation graphs
//! - [`predict`]: fusion, a gated recurrent response predictor and AUC/ACC evaluation
//! - [`synth`]: synthetic students with slip/guess noise and recovery scoring
//! - [`pipeline`]: run configuration, end-to-end runs, ablations, sweeps

pub mod config;
pub mod detect;
pub mod dpopt;
pub mod ingest;
pub mod optim;
pub mod pipeline;
pub mod predict;
pub mod pretrain;
pub mod seed;
pub mod stats;
pub mod synth;

pub use detect::{CoherenceParams, ContinuityParams, Control, ControlDecision, PairContext};
pub use dpopt::{DpParams, OptimizedSeq, PartitionParams, Stages};
pub use ingest::{Dataset, Interaction, StudentSequence};
pub use pipeline::{Metrics, RunConfig, Variant};
pub use stats::{DifficultyTable, StateDifficultySeq};
