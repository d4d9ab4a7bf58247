//! Online learning of personalized decision support policies.
//!
//! Given a stream of inputs and a decision-maker whose 0/1 decision loss is
//! observed after each trial, the engine learns which form of support
//! (no support, a model prediction, an expert-consensus distribution, an LLM
//! answer, ...) to show for each input, optionally trading expected loss
//! against the cost of the support.
//!
//! Layout:
//!
//! - [`model`]: datasets, actions, interaction records and the 0/1 loss.
//! - [`estimators`]: per-action estimates of human error (LinUCB, online KNN).
//! - [`policy`]: the learning session, frozen snapshots, and baselines.
//! - [`simulator`]: region-structured synthetic decision-makers.
//! - [`evaluation`]: expected loss/cost, excess loss, Pareto fronts, reliance.
//! - [`tuning`]: trade-off sweeps and deployment-selection strategies.
//! - [`experiment`]: the config-driven runner behind the CLI.
//! - [`service`]: HTTP service for live sessions with real decision-makers.
//! - [`synth`]: synthetic datasets and expertise populations.

pub mod estimators;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod policy;
pub mod rng;
pub mod service;
pub mod simulator;
pub mod synth;
pub mod tuning;

pub use estimators::{ArmEstimate, EstimatorError, KnnBuffer, LinUcbState};
pub use evaluation::{EvalError, EvaluationSet, ParetoPoint};
pub use model::{
    ContextVector, DatasetError, InteractionRecord, ModelError, Payload, SupportAction,
    SupportKind, TaskDataset, TaskItem,
};
pub use policy::{EngineParams, Objective, PolicyError, PolicyKind, PolicySnapshot, ThreadSession};
pub use simulator::{ExpertiseProfile, ProfileClass, ProfileKind, SimError, SyntheticDecisionMaker};
