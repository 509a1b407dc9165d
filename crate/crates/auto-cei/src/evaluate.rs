//! Scores a policy on a task set: sample, parse, classify, reduce.
//!
//! Evaluation draws come from RNG streams keyed by `(seed, scope, task,
//! draw)` with no round or curriculum position in the key. Every evaluation
//! against the same split therefore reuses the same underlying randomness
//! (common random numbers), so differences between two policies' scores
//! measure policy movement rather than resampling noise — which is what the
//! expert-iteration stopping rule and the hill climb compare.

use serde::{Deserialize, Serialize};

use crate::corpus::{classify_outcome, parse_response, MarkerSpec, Outcome, OutcomeRecord};
use crate::env::TaskSet;
use crate::error::Result;
use crate::metrics::{self, LengthStats, MetricsReport, OutcomeCounts};
use crate::policy::{GenerationConfig, PolicyHandle, StreamKey};
use crate::Real;

/// One classified draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub task_id: String,
    pub outcome: Outcome,
    /// Reasoning length of the response.
    pub len: u32,
    /// The task's oracle step count, for difficulty-binned curves.
    pub l_star: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Rows in (task order, draw order) — deterministic for a fixed key.
    pub rows: Vec<OutcomeRow>,
}

impl EvalResult {
    pub fn counts(&self) -> OutcomeCounts {
        let mut counts = OutcomeCounts::default();
        for row in &self.rows {
            counts.add(&row.outcome);
        }
        counts
    }

    /// Correct over everything — defined even for all-refusal batches.
    pub fn accuracy(&self) -> Real {
        let counts = self.counts();
        counts.n_correct as Real / counts.n_total as Real
    }

    /// Refusals over everything — defined even for all-refusal batches.
    pub fn refusal_rate(&self) -> Real {
        let counts = self.counts();
        counts.n_refusal as Real / counts.n_total as Real
    }

    pub fn report(&self, lambdas: &[Real]) -> Result<MetricsReport<Real>> {
        metrics::report_from_counts(&self.counts(), lambdas)
    }

    /// Reasoning-length statistics over all rows, refusals included.
    pub fn length_stats(&self) -> Result<LengthStats<Real>> {
        let lengths: Vec<u32> = self.rows.iter().map(|r| r.len).collect();
        metrics::reasoning_length_stats(&lengths)
    }

    /// `(outcome, task optimal steps)` pairs for difficulty-binned curves.
    pub fn difficulty_pairs(&self) -> Vec<(Outcome, u32)> {
        self.rows.iter().map(|r| (r.outcome, r.l_star)).collect()
    }

    /// Flat export records, one per row.
    pub fn records(&self) -> Vec<OutcomeRecord> {
        self.rows.iter().map(|r| OutcomeRecord::new(&r.task_id, r.outcome, r.len)).collect()
    }
}

/// Samples `draws` responses per task and classifies them.
pub fn evaluate_policy(
    policy: &PolicyHandle,
    tasks: &TaskSet,
    marker: &MarkerSpec,
    gen: &GenerationConfig,
    draws: usize,
    key: &StreamKey,
    parallelism: usize,
) -> Result<EvalResult> {
    let per_task = crate::par::try_map(parallelism, tasks.tasks(), |_, task| {
        let raw = policy.sample(task, draws, marker, gen, key)?;
        let mut rows = Vec::with_capacity(draws);
        for response in &raw {
            let parsed = parse_response(response, marker)?;
            rows.push(OutcomeRow {
                task_id: task.id.clone(),
                outcome: classify_outcome(&parsed, task),
                len: parsed.len,
                l_star: task.optimal_steps,
            });
        }
        Ok(rows)
    })?;
    Ok(EvalResult { rows: per_task.into_iter().flatten().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_batch;
    use crate::policy::SimPolicyParams;

    fn marker() -> MarkerSpec {
        MarkerSpec::keyword("Since")
    }

    #[test]
    fn perfect_policy_scores_perfectly() {
        let tasks = generate_batch("val", 20, 1..=6, 3).unwrap();
        let policy = PolicyHandle::simulated(SimPolicyParams::new(0.0, 0.0, 3.0, 0.0));
        let result = evaluate_policy(
            &policy,
            &tasks,
            &marker(),
            &GenerationConfig::default(),
            4,
            &StreamKey::new(7, "val"),
            1,
        )
        .unwrap();
        assert_eq!(result.rows.len(), 80);
        assert_eq!(result.accuracy(), 1.0);
        assert_eq!(result.refusal_rate(), 0.0);
        let report = result.report(&[0.2]).unwrap();
        assert_eq!(report.pre, 1.0);
        assert_eq!(report.f(0.2), 1.0);
        // Deterministic lengths equal the oracle step count per task.
        for row in &result.rows {
            assert_eq!(row.len, row.l_star);
        }
    }

    #[test]
    fn common_random_numbers_make_same_policy_score_identically() {
        let tasks = generate_batch("val", 15, 1..=8, 5).unwrap();
        let policy = PolicyHandle::simulated(SimPolicyParams::new(0.3, 0.1, 3.0, 0.4));
        let gen = GenerationConfig::default();
        let key = StreamKey::new(11, "val");
        let a = evaluate_policy(&policy, &tasks, &marker(), &gen, 4, &key, 1).unwrap();
        let b = evaluate_policy(&policy, &tasks, &marker(), &gen, 4, &key, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn length_stats_cover_refusals() {
        // theta = 0, q = 1, epsilon = 1: every draw refuses at length 2.
        let tasks = generate_batch("val", 10, 2..=5, 9).unwrap();
        let policy = PolicyHandle::simulated(SimPolicyParams::new(1.0, 0.0, 0.0, 1.0));
        let result = evaluate_policy(
            &policy,
            &tasks,
            &marker(),
            &GenerationConfig::default(),
            2,
            &StreamKey::new(2, "val"),
            1,
        )
        .unwrap();
        assert_eq!(result.refusal_rate(), 1.0);
        let stats = result.length_stats().unwrap();
        assert_eq!(stats.mu, 2.0);
        assert_eq!(stats.sigma, 0.0);
        // Precision is undefined on an all-refusal batch.
        assert!(result.report(&[0.2]).is_err());
    }
}
