//! Automatic curriculum expert iteration (Auto-CEI) for refusal-aware
//! reasoning policies.
//!
//! The pipeline trains a policy on synthetic rule-chain reasoning tasks so
//! that it answers when it can and refuses when it cannot:
//!
//! 1. refusal-aware initialisation (SFT, then refusal-annotated re-tuning
//!    until the validation refusal rate clears a floor),
//! 2. expert iteration with reward-weighted resampling of sampled
//!    trajectories,
//! 3. an outer curriculum that hill-climbs the refusal-compensation
//!    threshold `c1` of the reward curve and keeps the best policy by the
//!    objective `f = (1 - lambda) * Pre + lambda * (1 - IDK)`.
//!
//! Policies are either a built-in simulated reasoner (parameterised by
//! per-step derail/recover/refusal rates) or a remote OpenAI-compatible
//! service. Every random draw comes from a stream keyed by the run seed and
//! a structured path, so runs are bit-reproducible at any parallelism.
//!
//! Numeric kernels (reward curve, calibration, resampling weights, objective,
//! summary statistics) are generic over [`scalar::Scalar`]; the aliases below
//! fix the pipeline's working precision to `f64`.

pub mod config;
pub mod corpus;
pub mod curriculum;
pub mod ei;
pub mod env;
pub mod error;
pub mod evaluate;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod run;
pub mod scalar;

pub(crate) mod par;

pub use error::{Error, Result};

/// Working scalar type of the pipeline.
pub type Real = f64;

pub type RewardParams = reward::RewardParams<Real>;
pub type LengthStats = metrics::LengthStats<Real>;
pub type MetricsReport = metrics::MetricsReport<Real>;
pub type LengthBin = metrics::LengthBin<Real>;
