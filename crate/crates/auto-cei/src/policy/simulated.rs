//! Parametric simulated reasoner.
//!
//! The policy walks a task's oracle derivation step by step. At every step
//! it can *derail* (probability `epsilon`), after which steps stop making
//! progress until it *recovers* (probability `rho`). Once derailed at step
//! `theta` or later it may give up and refuse (probability `q`). Running out
//! of the step budget `t_max` forces a wrong answer. The per-step derail
//! hazard makes failure probability compound geometrically with reasoning
//! length — at `rho = q = 0`, `P(correct) = (1 - epsilon)^L` for an
//! `L`-step task — which is the failure law the curriculum exists to fight.
//!
//! `finetune` is moment matching: it maps summary statistics of the SFT
//! dataset onto new parameters, always anchored at the pretraining `base`
//! parameters rather than the current drifted ones. Training data dense in
//! correct answers lowers `epsilon`; correct-but-longer-than-optimal
//! trajectories (recoveries) raise `rho`; the refusal fraction and mean
//! refusal length pull `q` and `theta`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    classify_outcome, parse_response, render_answer, render_refusal, Dataset, MarkerSpec, Outcome,
};
use crate::env::{Label, RuleChainTask, TaskSet};
use crate::error::{Error, Result};
use crate::policy::{FinetuneOptions, GenerationConfig};

/// Default step budget; must cover the largest configured task depth.
pub const DEFAULT_T_MAX: u32 = 40;

/// Step text emitted while derailed: plausible-looking, no progress.
const FILLER_BODY: &str = "no rule fires cleanly here, the known facts are rechecked";

fn default_t_max() -> u32 {
    DEFAULT_T_MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPolicyParams {
    /// Per-step probability of derailing while on track.
    pub epsilon: f64,
    /// Per-step probability of recovering while derailed.
    pub rho: f64,
    /// Step index from which a derailed policy may refuse.
    pub theta: f64,
    /// Per-step refusal hazard once derailed at step >= theta.
    pub q: f64,
    #[serde(default = "default_t_max")]
    pub t_max: u32,
    /// The pretraining parameter vector that finetuning restarts from;
    /// `None` marks this vector as the base itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Box<SimPolicyParams>>,
}

impl SimPolicyParams {
    pub fn new(epsilon: f64, rho: f64, theta: f64, q: f64) -> SimPolicyParams {
        SimPolicyParams { epsilon, rho, theta, q, t_max: DEFAULT_T_MAX, base: None }
    }

    /// The parameter vector SFT restarts from.
    pub fn anchor(&self) -> &SimPolicyParams {
        self.base.as_deref().unwrap_or(self)
    }

    /// Problems with the parameter vector, as config-style messages.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        for (name, p) in [("epsilon", self.epsilon), ("rho", self.rho), ("q", self.q)] {
            if !(0.0..=1.0).contains(&p) {
                errors.push(format!("policy.{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.theta.is_nan() || self.theta < 0.0 {
            errors.push(format!("policy.theta must be >= 0, got {}", self.theta));
        }
        if self.t_max == 0 {
            errors.push("policy.t_max must be >= 1".to_string());
        }
        errors
    }

    fn effective(&self, gen: &GenerationConfig) -> (f64, f64) {
        let scale = |p: f64| (p * gen.temperature).clamp(0.0, 1.0);
        (scale(self.epsilon), scale(self.q))
    }

    /// Runs the generative loop once and renders the raw response text.
    ///
    /// `oracle` is the task's oracle derivation (one body per productive
    /// step); its length is the task's optimal step count and must fit the
    /// step budget.
    pub fn generate(
        &self,
        task: &RuleChainTask,
        oracle: &[String],
        marker: &MarkerSpec,
        gen: &GenerationConfig,
        rng: &mut ChaCha8Rng,
    ) -> String {
        let l_star = oracle.len();
        assert!(
            l_star >= 1 && l_star as u32 <= self.t_max,
            "task depth {l_star} outside step budget {}",
            self.t_max
        );
        let (epsilon, q) = self.effective(gen);
        let mut bodies: Vec<String> = Vec::with_capacity(l_star);
        let mut derailed = false;
        let mut productive = 0usize;
        for t in 1..=self.t_max {
            if derailed {
                if f64::from(t) >= self.theta && rng.gen::<f64>() < q {
                    bodies.push(FILLER_BODY.to_string());
                    return render_refusal(&bodies, marker);
                }
                bodies.push(FILLER_BODY.to_string());
                if rng.gen::<f64>() < self.rho {
                    derailed = false;
                }
            } else if rng.gen::<f64>() < epsilon {
                derailed = true;
                bodies.push(FILLER_BODY.to_string());
            } else {
                bodies.push(oracle[productive].clone());
                productive += 1;
                if productive == l_star {
                    return render_answer(&bodies, task.label, marker);
                }
            }
        }
        render_answer(&bodies, wrong_label(task.label, rng), marker)
    }

    /// Moment-matching SFT update, anchored at the base parameters.
    pub fn finetune(&self, stats: &DatasetStats, opts: &FinetuneOptions) -> SimPolicyParams {
        let base = self.anchor().clone_bare();
        let eta = opts.eta;
        let epsilon = (base.epsilon * (1.0 - eta * stats.frac_correct)).max(opts.epsilon_floor);
        let rho = base.rho + eta * stats.frac_verbose_correct * (opts.rho_cap - base.rho);
        let theta = match stats.mean_refusal_len {
            Some(len) => (1.0 - eta) * base.theta + eta * len,
            None => base.theta,
        };
        let q = ((1.0 - eta) * base.q + eta * stats.frac_refusal).clamp(0.0, 1.0);
        SimPolicyParams { epsilon, rho, theta, q, t_max: base.t_max, base: Some(Box::new(base)) }
    }

    fn clone_bare(&self) -> SimPolicyParams {
        SimPolicyParams { base: None, ..self.clone() }
    }
}

fn wrong_label(truth: Label, rng: &mut ChaCha8Rng) -> Label {
    let others: [Label; 2] = match truth {
        Label::True => [Label::False, Label::Unknown],
        Label::False => [Label::True, Label::Unknown],
        Label::Unknown => [Label::True, Label::False],
    };
    others[rng.gen_range(0..2)]
}

/// Summary statistics of an SFT dataset, the sufficient input of the
/// simulated finetuning update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub n: usize,
    /// Fraction of records classified Correct.
    pub frac_correct: f64,
    /// Among Correct records, the fraction longer than their task's optimal
    /// step count (i.e. trajectories that derailed and recovered).
    pub frac_verbose_correct: f64,
    /// Fraction of records classified Refusal.
    pub frac_refusal: f64,
    /// Mean reasoning length of Refusal records; `None` when there are none.
    pub mean_refusal_len: Option<f64>,
}

/// Parses and classifies every record of `dataset` against its task and
/// reduces to [`DatasetStats`].
pub fn dataset_stats(
    dataset: &Dataset,
    tasks: &TaskSet,
    marker: &MarkerSpec,
) -> Result<DatasetStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (mut n_correct, mut n_verbose, mut n_refusal) = (0usize, 0usize, 0usize);
    let mut refusal_len_sum = 0u64;
    for record in &dataset.records {
        let task = tasks
            .get(&record.task_id)
            .ok_or_else(|| Error::UnknownTaskId(record.task_id.clone()))?;
        let parsed = parse_response(&record.completion, marker)?;
        match classify_outcome(&parsed, task) {
            Outcome::Correct => {
                n_correct += 1;
                if parsed.len > task.optimal_steps {
                    n_verbose += 1;
                }
            }
            Outcome::Wrong => {}
            Outcome::Refusal { .. } => {
                n_refusal += 1;
                refusal_len_sum += u64::from(parsed.len);
            }
        }
    }
    let n = dataset.len();
    Ok(DatasetStats {
        n,
        frac_correct: n_correct as f64 / n as f64,
        frac_verbose_correct: if n_correct > 0 { n_verbose as f64 / n_correct as f64 } else { 0.0 },
        frac_refusal: n_refusal as f64 / n as f64,
        mean_refusal_len: if n_refusal > 0 {
            Some(refusal_len_sum as f64 / n_refusal as f64)
        } else {
            None
        },
    })
}
