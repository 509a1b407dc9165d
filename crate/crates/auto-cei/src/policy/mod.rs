//! The policy abstraction: something that can `sample` responses for a task
//! and be `finetune`d on a dataset.
//!
//! Two backends implement it. The simulated backend is a small parametric
//! reasoner whose failure dynamics are analytically checkable (per-step
//! derail/recover/refuse probabilities), so the whole pipeline can run and
//! be tested on one machine. The remote backend talks to an
//! OpenAI-compatible inference service and delegates fine-tuning to the
//! provider's job API.
//!
//! Policy handles are immutable values: `finetune` returns a new handle and
//! never mutates the input, and `sample` draws from per-(task, draw) RNG
//! streams so results are independent of scheduling order.

mod remote;
mod simulated;

pub use remote::{RemoteOptions, RemotePolicy};
pub use simulated::{dataset_stats, DatasetStats, SimPolicyParams, DEFAULT_T_MAX};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Dataset, MarkerSpec};
use crate::env::{RuleChainTask, TaskSet};
use crate::error::Result;

/// Decoding knobs forwarded to the backend.
///
/// The simulated backend maps `temperature` onto its derail and refusal
/// probabilities (scaled multiplicatively, clamped to [0, 1]) so the knob
/// has the usual monotone effect; `top_p` only matters remotely. `k` is the
/// default samples-per-task fan-out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub k: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { temperature: 1.0, top_p: 0.95, k: 16 }
    }
}

/// Strength and bounds of the simulated finetuning update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneOptions {
    /// Interpolation weight of the dataset statistics against the base
    /// parameters (the single stand-in for SFT epoch/batch hyperparameters).
    pub eta: f64,
    /// Lower bound on the per-step derail probability after finetuning.
    pub epsilon_floor: f64,
    /// Upper bound the recovery probability approaches.
    pub rho_cap: f64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions { eta: 0.5, epsilon_floor: 0.02, rho_cap: 0.9 }
    }
}

/// Names the RNG scope of a batch of draws. Each draw inside the batch gets
/// its own stream keyed by `(seed, scope, task id, draw index)`, so two
/// batches with the same key reproduce each other draw for draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub scope: String,
}

impl StreamKey {
    pub fn new(seed: u64, scope: impl Into<String>) -> StreamKey {
        StreamKey { seed, scope: scope.into() }
    }

    pub(crate) fn draw_rng(&self, task_id: &str, draw: usize) -> rand_chacha::ChaCha8Rng {
        crate::rng::stream(self.seed, &[&self.scope, task_id, &draw.to_string()])
    }
}

#[derive(Debug, Clone)]
pub enum PolicyHandle {
    Simulated(SimPolicyParams),
    Remote(RemotePolicy),
}

impl PolicyHandle {
    pub fn simulated(params: SimPolicyParams) -> PolicyHandle {
        PolicyHandle::Simulated(params)
    }

    pub fn remote(options: RemoteOptions) -> Result<PolicyHandle> {
        Ok(PolicyHandle::Remote(RemotePolicy::connect(options)?))
    }

    /// Draws `k` responses for `task`. Simulated draws are reproducible from
    /// the stream key; remote draws use provider-side randomness and the key
    /// is ignored.
    pub fn sample(
        &self,
        task: &RuleChainTask,
        k: usize,
        marker: &MarkerSpec,
        gen: &GenerationConfig,
        key: &StreamKey,
    ) -> Result<Vec<String>> {
        assert!(k >= 1, "sample requires at least one draw");
        match self {
            PolicyHandle::Simulated(params) => {
                let oracle = crate::env::oracle_steps(task)?;
                let mut out = Vec::with_capacity(k);
                for draw in 0..k {
                    let mut rng = key.draw_rng(&task.id, draw);
                    out.push(params.generate(task, &oracle, marker, gen, &mut rng));
                }
                Ok(out)
            }
            PolicyHandle::Remote(remote) => remote.sample(task, k, gen),
        }
    }

    /// Supervised finetuning on `dataset`, always restarting from the base
    /// policy recorded at pretraining time (never from `self`'s drifted
    /// state). Returns the new policy.
    pub fn finetune(
        &self,
        dataset: &Dataset,
        tasks: &TaskSet,
        marker: &MarkerSpec,
        opts: &FinetuneOptions,
    ) -> Result<PolicyHandle> {
        if dataset.is_empty() {
            return Err(crate::Error::EmptyBatch);
        }
        match self {
            PolicyHandle::Simulated(params) => {
                let stats = dataset_stats(dataset, tasks, marker)?;
                Ok(PolicyHandle::Simulated(params.finetune(&stats, opts)))
            }
            PolicyHandle::Remote(remote) => Ok(PolicyHandle::Remote(remote.finetune(dataset)?)),
        }
    }

    /// JSON snapshot persisted as `policy_<stage>.json` in run directories.
    pub fn snapshot(&self) -> serde_json::Value {
        match self {
            PolicyHandle::Simulated(params) => {
                serde_json::to_value(params).expect("simulated params serialize")
            }
            PolicyHandle::Remote(remote) => json!({
                "backend": "remote",
                "model": remote.model(),
                "base_model": remote.base_model(),
            }),
        }
    }

    /// Short human-readable identity for logs.
    pub fn label(&self) -> String {
        match self {
            PolicyHandle::Simulated(p) => format!(
                "simulated(epsilon={:.4}, rho={:.4}, theta={:.2}, q={:.4})",
                p.epsilon, p.rho, p.theta, p.q
            ),
            PolicyHandle::Remote(remote) => format!("remote({})", remote.model()),
        }
    }
}
