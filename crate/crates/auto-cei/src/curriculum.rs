//! Curriculum orchestration: refusal-aware initialization, the
//! precision/laziness objective, and hill-climbing over the
//! refusal-compensation threshold `c1`.
//!
//! Initialization finetunes on oracle derivations, then repeatedly samples
//! the model on its own training set, keeps correct answers, converts wrong
//! answers into refusals by appending the canonical suffix, and finetunes
//! the base policy on the mix until validation shows at least a floor rate
//! of refusal behaviour.
//!
//! The hill climb walks `c1` over a fixed grid spanning `[mu - 2 sigma,
//! mu + 2 sigma]` in steps of `d = min(0.5, 0.4 sigma)`, evaluating each
//! grid point at most once (an evaluation is a full expert-iteration run,
//! the expensive unit of this whole pipeline) and moving while a neighbor
//! strictly improves the objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    annotate_refusal, classify_outcome, parse_response, Dataset, MarkerSpec, Outcome, Split,
};
use crate::env::TaskSet;
use crate::error::{Error, Result};
use crate::evaluate::evaluate_policy;
use crate::metrics::MetricsReport;
use crate::policy::{FinetuneOptions, GenerationConfig, PolicyHandle, StreamKey};
use crate::scalar::Scalar;
use crate::Real;

/// The curriculum objective `f = (1 - lambda) * pre + lambda * (1 - idk)`:
/// high precision with few refusals, traded off by `lambda`.
pub fn objective_f<F: Scalar>(report: &MetricsReport<F>, lambda: F) -> Result<F> {
    let unit = |what: &'static str, value: F| -> Result<()> {
        if value >= F::zero() && value <= F::one() {
            Ok(())
        } else {
            Err(Error::OutOfRange { what, value: value.to_f64().unwrap_or(f64::NAN) })
        }
    };
    unit("lambda", lambda)?;
    unit("precision", report.pre)?;
    unit("refusal rate", report.idk)?;
    Ok(crate::metrics::objective(report.pre, report.idk, lambda))
}

/// Hill-climb step size for `c1`.
pub fn step_size<F: Scalar>(sigma: F) -> F {
    assert!(sigma > F::zero(), "step size requires a positive sigma");
    F::from_config(0.5).min(F::from_config(0.4) * sigma)
}

/// Knobs of the refusal-aware initialization loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitOptions {
    /// Minimum validation refusal rate the initial policy must reach.
    pub refusal_floor: Real,
    /// Collect-and-finetune cycles to attempt before giving up.
    pub max_cycles: u32,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions { refusal_floor: 0.25, max_cycles: 5 }
    }
}

/// Shared plumbing for the initialization and curriculum stages.
#[derive(Debug, Clone)]
pub struct PipelineContext<'a> {
    pub train: &'a TaskSet,
    pub val: &'a TaskSet,
    pub marker: &'a MarkerSpec,
    pub gen: GenerationConfig,
    pub finetune: FinetuneOptions,
    /// Samples per task when collecting training corpora.
    pub k: usize,
    pub seed: u64,
    pub parallelism: usize,
    /// Validation draws per task.
    pub eval_draws: usize,
}

impl PipelineContext<'_> {
    pub fn evaluate_val(&self, policy: &PolicyHandle) -> Result<crate::evaluate::EvalResult> {
        evaluate_policy(
            policy,
            self.val,
            self.marker,
            &self.gen,
            self.eval_draws,
            &StreamKey::new(self.seed, "val"),
            self.parallelism,
        )
    }
}

#[derive(Debug)]
pub struct InitOutcome {
    pub policy: PolicyHandle,
    /// Validation accuracy of the plain SFT policy, before refusal
    /// training; this later sets the resampling temperature.
    pub sft_val_accuracy: Real,
    /// Collect-and-finetune cycles actually run.
    pub cycles: u32,
    /// Validation refusal rate of the returned policy.
    pub refusal_rate: Real,
    /// False when `max_cycles` passed without reaching the floor.
    pub floor_reached: bool,
}

/// Builds the supervised dataset of oracle derivations, one per task.
pub fn oracle_dataset(tasks: &TaskSet, marker: &MarkerSpec) -> Result<Dataset> {
    let mut dataset = Dataset::new(Split::Train);
    for task in tasks.tasks() {
        let steps = crate::env::oracle_steps(task)?;
        dataset.push(task, crate::corpus::render_answer(&steps, task.label, marker));
    }
    Ok(dataset)
}

/// Samples the training set and splits responses for one initialization
/// cycle: correct answers are kept, wrong answers are refusal-annotated,
/// and sampled refusals are kept verbatim from the second cycle on (the
/// first cycle's policy has not been refusal-trained, so its stray
/// refusals are dropped).
pub fn collect_refusal_aware(
    policy: &PolicyHandle,
    ctx: &PipelineContext<'_>,
    cycle: u32,
) -> Result<Dataset> {
    let key = StreamKey::new(ctx.seed, format!("init/c{cycle}"));
    let per_task = crate::par::try_map(ctx.parallelism, ctx.train.tasks(), |_, task| {
        let raw = policy.sample(task, ctx.k, ctx.marker, &ctx.gen, &key)?;
        let mut kept: Vec<String> = Vec::with_capacity(raw.len());
        for response in raw {
            let parsed = parse_response(&response, ctx.marker)?;
            match classify_outcome(&parsed, task) {
                Outcome::Correct => kept.push(response),
                Outcome::Wrong => kept.push(annotate_refusal(&response, ctx.marker)?),
                Outcome::Refusal { .. } => {
                    if cycle >= 2 {
                        kept.push(response);
                    }
                }
            }
        }
        Ok(kept)
    })?;
    let mut dataset = Dataset::new(Split::Train);
    for (task, kept) in ctx.train.tasks().iter().zip(per_task) {
        for completion in kept {
            dataset.push(task, completion);
        }
    }
    Ok(dataset)
}

/// Refusal-aware policy initialization.
///
/// Finetunes on oracle derivations, then cycles collect-and-finetune until
/// the validation refusal rate reaches the floor, up to
/// `opts.max_cycles` cycles. Each finetune restarts from the base policy.
/// Returns the first policy meeting the floor, or the last one flagged
/// `floor_reached: false`.
pub fn initialise_policy(
    base: &PolicyHandle,
    ctx: &PipelineContext<'_>,
    opts: &InitOptions,
) -> Result<InitOutcome> {
    let sft = base.finetune(
        &oracle_dataset(ctx.train, ctx.marker)?,
        ctx.train,
        ctx.marker,
        &ctx.finetune,
    )?;
    let sft_val_accuracy = ctx.evaluate_val(&sft)?.accuracy();
    log::info!("initial SFT policy: val accuracy {sft_val_accuracy:.4}");

    let mut current = sft;
    let mut refusal_rate = 0.0;
    for cycle in 1..=opts.max_cycles {
        let dataset = collect_refusal_aware(&current, ctx, cycle)?;
        let next = current.finetune(&dataset, ctx.train, ctx.marker, &ctx.finetune)?;
        refusal_rate = ctx.evaluate_val(&next)?.refusal_rate();
        log::info!(
            "init cycle {cycle}: {} records, val refusal rate {refusal_rate:.4}",
            dataset.len()
        );
        current = next;
        if refusal_rate >= opts.refusal_floor {
            return Ok(InitOutcome {
                policy: current,
                sft_val_accuracy,
                cycles: cycle,
                refusal_rate,
                floor_reached: true,
            });
        }
    }
    log::warn!(
        "initialization exhausted {} cycles below the {:.0}% refusal floor (reached {:.1}%)",
        opts.max_cycles,
        opts.refusal_floor * 100.0,
        refusal_rate * 100.0
    );
    Ok(InitOutcome {
        policy: current,
        sft_val_accuracy,
        cycles: opts.max_cycles,
        refusal_rate,
        floor_reached: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumStatus {
    Running,
    /// Neither neighbor strictly improves on the current point.
    Converged,
    /// No in-domain move remains to evaluate.
    DomainExhausted,
}

/// Hill-climb search state over the `c1` grid.
///
/// Grid point `i` sits at `c1_start + i * d`, clamped to the domain; the
/// clamp gives each domain edge exactly one index. `visited` memoizes the
/// objective per index, so re-examining a point never costs a second
/// expert-iteration run.
#[derive(Debug, Clone)]
pub struct CurriculumState {
    c1_start: Real,
    d: Real,
    lo: Real,
    hi: Real,
    k_min: i32,
    k_max: i32,
    pub lambda: Real,
    pub current: i32,
    pub visited: BTreeMap<i32, Real>,
    pub status: CurriculumStatus,
    /// Accepted moves so far.
    pub moves: u32,
}

impl CurriculumState {
    /// Standard geometry: start at the mean, search two standard
    /// deviations either side.
    pub fn from_stats(mu: Real, sigma: Real, lambda: Real) -> Result<CurriculumState> {
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::DegenerateSigma);
        }
        let d = step_size(sigma);
        Ok(CurriculumState::with_geometry(mu, d, mu - 2.0 * sigma, mu + 2.0 * sigma, lambda))
    }

    /// Explicit geometry, used by tests with synthetic objectives.
    pub fn with_geometry(
        c1_start: Real,
        d: Real,
        lo: Real,
        hi: Real,
        lambda: Real,
    ) -> CurriculumState {
        assert!(d > 0.0, "step size must be positive");
        assert!(lo <= c1_start && c1_start <= hi, "start must lie in the domain");
        let k_max = ((hi - c1_start) / d - 1e-9).ceil().max(0.0) as i32;
        let k_min = -(((c1_start - lo) / d - 1e-9).ceil().max(0.0) as i32);
        CurriculumState {
            c1_start,
            d,
            lo,
            hi,
            k_min,
            k_max,
            lambda,
            current: 0,
            visited: BTreeMap::new(),
            status: CurriculumStatus::Running,
            moves: 0,
        }
    }

    pub fn c1_at(&self, index: i32) -> Real {
        (self.c1_start + Real::from(index) * self.d).clamp(self.lo, self.hi)
    }

    pub fn c1_current(&self) -> Real {
        self.c1_at(self.current)
    }

    pub fn domain(&self) -> (Real, Real) {
        (self.lo, self.hi)
    }

    pub fn step(&self) -> Real {
        self.d
    }

    /// Recovers the grid index of a previously produced `c1` value
    /// (checkpoint records store values, not indices).
    pub fn index_of(&self, c1: Real) -> Option<i32> {
        let nominal = ((c1 - self.c1_start) / self.d).round() as i32;
        for index in [nominal - 1, nominal, nominal + 1, self.k_min, self.k_max] {
            if (self.k_min..=self.k_max).contains(&index)
                && (self.c1_at(index) - c1).abs() <= 1e-9 * c1.abs().max(1.0)
            {
                return Some(index);
            }
        }
        None
    }

    /// Seeds a memoized objective value (used when resuming).
    pub fn record(&mut self, index: i32, f: Real) {
        assert!(
            (self.k_min..=self.k_max).contains(&index),
            "index {index} outside grid [{}, {}]",
            self.k_min,
            self.k_max
        );
        self.visited.insert(index, f);
    }

    /// Expert-iteration launches so far (each visited point cost one).
    pub fn launches(&self) -> usize {
        self.visited.len()
    }

    /// Upper bound on launches: the domain width over the step size, plus
    /// the starting point.
    pub fn launch_budget(&self) -> usize {
        (((self.hi - self.lo) / self.d).ceil() as usize) + 1
    }

    /// The best visited point as `(c1, f)`; ties prefer the larger `c1`.
    pub fn best(&self) -> (Real, Real) {
        let (&index, &f) = self
            .visited
            .iter()
            .max_by(|(i, f_a), (j, f_b)| {
                f_a.total_cmp(f_b).then_with(|| self.c1_at(**i).total_cmp(&self.c1_at(**j)))
            })
            .expect("best() requires at least one visited point");
        (self.c1_at(index), f)
    }

    fn neighbor_indices(&self) -> Vec<i32> {
        let current_value = self.c1_current();
        [self.current - 1, self.current + 1]
            .into_iter()
            .filter(|&i| (self.k_min..=self.k_max).contains(&i))
            .filter(|&i| self.c1_at(i) != current_value)
            .collect()
    }

    /// One hill-climb step: make sure the current point and both in-domain
    /// neighbors are evaluated (memoized — `evaluate` runs at most once per
    /// grid point, ever), then move to the strictly best neighbor or stop.
    pub fn hill_climb_step(
        &mut self,
        mut evaluate: impl FnMut(i32, Real) -> Result<Real>,
    ) -> Result<CurriculumStatus> {
        assert_eq!(self.status, CurriculumStatus::Running, "search already finished");
        let mut value_at = |state: &mut Self, index: i32| -> Result<Real> {
            match state.visited.get(&index) {
                Some(&f) => Ok(f),
                None => {
                    let f = evaluate(index, state.c1_at(index))?;
                    state.visited.insert(index, f);
                    Ok(f)
                }
            }
        };
        let current_f = value_at(self, self.current)?;
        let neighbors = self.neighbor_indices();
        if neighbors.is_empty() {
            self.status = CurriculumStatus::DomainExhausted;
            return Ok(self.status);
        }
        let mut best: Option<(i32, Real)> = None;
        for index in neighbors {
            let f = value_at(self, index)?;
            let better = match best {
                None => true,
                // Ties between neighbors prefer the larger c1: more
                // reasoning before a refusal pays off.
                Some((best_index, best_f)) => {
                    f > best_f || (f == best_f && self.c1_at(index) > self.c1_at(best_index))
                }
            };
            if better {
                best = Some((index, f));
            }
        }
        let (best_index, best_f) = best.expect("at least one neighbor was evaluated");
        if best_f > current_f {
            self.current = best_index;
            self.moves += 1;
        } else {
            self.status = CurriculumStatus::Converged;
        }
        Ok(self.status)
    }
}

/// Runs hill-climb steps until the search stops; returns the final status.
pub fn climb(
    state: &mut CurriculumState,
    mut evaluate: impl FnMut(i32, Real) -> Result<Real>,
) -> Result<CurriculumStatus> {
    let budget = state.launch_budget() * 2 + 2;
    for _ in 0..budget {
        if state.hill_climb_step(&mut evaluate)? != CurriculumStatus::Running {
            return Ok(state.status);
        }
    }
    unreachable!("hill climb failed to terminate within the move budget");
}
