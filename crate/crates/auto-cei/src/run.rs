//! Run orchestration.
//!
//! A run owns a directory. Everything the pipeline decides is persisted
//! there as it happens — datasets, policy snapshots, per-round expert
//! iteration logs, and one checkpoint record per curriculum point — so a
//! run can be resumed after a crash or re-scored under a different
//! objective weight without relaunching finished work. Reports
//! (`report.json`, `curves.csv`, `summary.md`) are derived purely from
//! those artifacts and can be regenerated at any time.
//!
//! Artifacts are written atomically (temp file + rename) and the checkpoint
//! file is append-only: resume never rewrites a completed record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{parse_depths, BackendConfig, RunConfig, RunMode};
use crate::corpus::{MarkerSpec, Outcome, OutcomeRecord};
use crate::curriculum::{
    initialise_policy, oracle_dataset, CurriculumState, CurriculumStatus, PipelineContext,
};
use crate::ei::{choose_tau, run_expert_iteration, EiConfig, EiContext, EiMode};
use crate::env::{generate_batch, TaskSet};
use crate::error::{Error, Result};
use crate::evaluate::evaluate_policy;
use crate::metrics::{curves_to_csv, length_binned_rates, objective, OutcomeCounts};
use crate::policy::{GenerationConfig, PolicyHandle, RemoteOptions, SimPolicyParams, StreamKey};
use crate::reward::{calibrate, RewardParams};
use crate::Real;

const CONFIG_FILE: &str = "config.toml";
const LOCK_FILE: &str = "run.lock";
const META_FILE: &str = "run_meta.json";
const CURRICULUM_FILE: &str = "curriculum.jsonl";
const TEST_OUTCOMES_FILE: &str = "test_outcomes.jsonl";
const REPORT_FILE: &str = "report.json";
const CURVES_FILE: &str = "curves.csv";
const SUMMARY_FILE: &str = "summary.md";

/// Files a run directory must contain before reports can be derived.
const REQUIRED_ARTIFACTS: [&str; 7] = [
    CONFIG_FILE,
    META_FILE,
    "data/train.jsonl",
    "data/val.jsonl",
    "data/test.jsonl",
    CURRICULUM_FILE,
    TEST_OUTCOMES_FILE,
];

/// Writes through a same-directory temp file and rename, so a crash never
/// leaves a partly written artifact under the final name.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Exclusive-run guard. The lock file is created with `create_new`, so a
/// second process driving the same directory fails fast; dropping the
/// guard releases the lock.
#[derive(Debug)]
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<RunLock> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::RunLocked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// One completed curriculum point, as checkpointed to `curriculum.jsonl`.
/// `f` is the objective at the lambda active when the point was launched;
/// resume re-scores from `pre` and `idk` when the lambda changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumRecord {
    pub c1: Real,
    pub c2: Real,
    pub f: Real,
    pub acc: Real,
    pub pre: Real,
    pub idk: Real,
    pub idk_acc: Real,
    pub ei_rounds: u32,
    pub policy_snapshot_path: String,
    pub dataset_hash: String,
}

/// Reward-calibration and search geometry, fixed once per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumMeta {
    pub mu: Real,
    pub sigma: Real,
    pub c1_start: Real,
    pub d: Real,
    pub c1_lo: Real,
    pub c1_hi: Real,
    pub c2: Real,
    pub tau: Real,
}

/// How the refusal-aware initialization ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitMeta {
    pub sft_val_accuracy: Real,
    pub cycles: u32,
    pub refusal_rate: Real,
    pub floor_reached: bool,
}

/// Immutable facts about a run plus the curriculum's completion status;
/// written before the search starts so a crashed run can be resumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub name: String,
    pub mode: RunMode,
    pub seed: u64,
    pub lambda: Real,
    pub k: usize,
    pub backend: String,
    pub dataset_hash: String,
    pub init: Option<InitMeta>,
    pub curriculum: Option<CurriculumMeta>,
    /// `None` while the search is still running (or was interrupted).
    pub curriculum_status: Option<CurriculumStatus>,
}

/// Final test-split metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub n: usize,
    pub acc: Real,
    pub pre: Real,
    pub idk: Real,
    pub idk_acc: Real,
    pub hallucination_rate: Real,
    pub f: Real,
}

/// Contents of `report.json`, derived entirely from persisted artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub mode: RunMode,
    pub seed: u64,
    pub lambda: Real,
    pub dataset_hash: String,
    /// Expert-iteration launches so far (visited curriculum points).
    pub launches: usize,
    pub curriculum_status: Option<CurriculumStatus>,
    pub init: Option<InitMeta>,
    pub calibration: Option<CurriculumMeta>,
    /// Best checkpoint under this report's lambda (its `f` is re-scored).
    pub best: Option<CurriculumRecord>,
    pub final_policy: String,
    pub test: TestMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub report: RunReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResumeSummary {
    pub run_dir: PathBuf,
    pub lambda: Real,
    /// Expert-iteration launches this resume added.
    pub new_launches: usize,
    pub report: RunReport,
}

/// Path helpers over a run directory.
#[derive(Debug, Clone)]
struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn new(root: &Path) -> RunDir {
        RunDir { root: root.to_path_buf() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn create_layout(&self) -> Result<()> {
        for sub in ["data", "policies", "ei"] {
            fs::create_dir_all(self.path(sub))?;
        }
        Ok(())
    }

    fn write_meta(&self, meta: &RunMeta) -> Result<()> {
        let mut body = serde_json::to_string_pretty(meta)?;
        body.push('\n');
        write_atomic(&self.path(META_FILE), body.as_bytes())
    }

    fn read_meta(&self) -> Result<RunMeta> {
        Ok(serde_json::from_str(&fs::read_to_string(self.path(META_FILE))?)?)
    }

    fn read_config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.path(CONFIG_FILE))
    }

    /// Persists a policy snapshot and returns its run-relative path.
    fn write_policy(&self, stage: &str, policy: &PolicyHandle) -> Result<String> {
        let rel = format!("policies/policy_{stage}.json");
        let mut body = serde_json::to_string_pretty(&policy.snapshot())?;
        body.push('\n');
        write_atomic(&self.path(&rel), body.as_bytes())?;
        Ok(rel)
    }

    /// Appends a checkpoint record. The file is rewritten atomically from
    /// the full in-memory list so it is always complete and parseable.
    fn append_record(
        &self,
        records: &mut Vec<CurriculumRecord>,
        record: CurriculumRecord,
    ) -> Result<()> {
        records.push(record);
        let mut body = String::new();
        for record in records.iter() {
            body.push_str(&serde_json::to_string(record)?);
            body.push('\n');
        }
        write_atomic(&self.path(CURRICULUM_FILE), body.as_bytes())
    }

    fn read_records(&self) -> Result<Vec<CurriculumRecord>> {
        read_jsonl(&self.path(CURRICULUM_FILE))
    }

    fn missing_artifacts(&self) -> Vec<String> {
        REQUIRED_ARTIFACTS
            .iter()
            .filter(|rel| !self.path(rel).is_file())
            .map(|rel| rel.to_string())
            .collect()
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| Error::ParseLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

fn stage_name(index: i32) -> String {
    if index < 0 {
        format!("c1_m{}", -i64::from(index))
    } else {
        format!("c1_p{index}")
    }
}

struct LoadedData {
    train: TaskSet,
    val: TaskSet,
    test: TaskSet,
    hash: String,
}

fn hash_splits(train: &str, val: &str, test: &str) -> String {
    crate::rng::sha256_hex(&[train.as_bytes(), val.as_bytes(), test.as_bytes()])
}

/// Generates the three task splits from one seed; split names key the RNG
/// streams, so sizes can change without reshuffling other splits.
pub fn generate_splits(
    sizes: [usize; 3],
    depths: std::ops::RangeInclusive<u32>,
    seed: u64,
) -> Result<(TaskSet, TaskSet, TaskSet)> {
    Ok((
        generate_batch("train", sizes[0], depths.clone(), seed)?,
        generate_batch("val", sizes[1], depths.clone(), seed)?,
        generate_batch("test", sizes[2], depths, seed)?,
    ))
}

/// Resolves the configured data source, copies canonical bytes into the run
/// directory, and hashes them.
fn prepare_data(config: &RunConfig, dir: &RunDir) -> Result<LoadedData> {
    let (train, val, test) = match &config.data.generate {
        Some(spec) => {
            let depths = parse_depths(&spec.depths).map_err(|m| Error::InvalidConfig(vec![m]))?;
            generate_splits(spec.sizes, depths, spec.seed)?
        }
        None => {
            let load = |path: &Option<PathBuf>| {
                TaskSet::from_jsonl(path.as_ref().expect("validated data paths"))
            };
            (load(&config.data.train)?, load(&config.data.val)?, load(&config.data.test)?)
        }
    };
    let (tb, vb, sb) = (train.to_jsonl_string(), val.to_jsonl_string(), test.to_jsonl_string());
    let hash = hash_splits(&tb, &vb, &sb);
    write_atomic(&dir.path("data/train.jsonl"), tb.as_bytes())?;
    write_atomic(&dir.path("data/val.jsonl"), vb.as_bytes())?;
    write_atomic(&dir.path("data/test.jsonl"), sb.as_bytes())?;
    Ok(LoadedData { train, val, test, hash })
}

fn load_run_data(dir: &RunDir) -> Result<LoadedData> {
    let train = TaskSet::from_jsonl(&dir.path("data/train.jsonl"))?;
    let val = TaskSet::from_jsonl(&dir.path("data/val.jsonl"))?;
    let test = TaskSet::from_jsonl(&dir.path("data/test.jsonl"))?;
    let hash =
        hash_splits(&train.to_jsonl_string(), &val.to_jsonl_string(), &test.to_jsonl_string());
    Ok(LoadedData { train, val, test, hash })
}

fn base_policy(config: &RunConfig) -> Result<PolicyHandle> {
    match &config.backend {
        BackendConfig::Simulated(params) => Ok(PolicyHandle::simulated(params.clone())),
        BackendConfig::Remote(options) => PolicyHandle::remote(options.clone()),
    }
}

/// Reconstructs a policy handle from a snapshot file. Remote snapshots
/// borrow connection options from `backend` (or the environment) with the
/// snapshot's model substituted in.
pub fn load_policy_snapshot(path: &Path, backend: Option<&BackendConfig>) -> Result<PolicyHandle> {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    if value.get("backend").and_then(|v| v.as_str()) == Some("remote") {
        let model = value
            .get("model")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::RemoteConfig("policy snapshot lacks a model id".into()))?;
        let mut options = match backend {
            Some(BackendConfig::Remote(options)) => options.clone(),
            _ => RemoteOptions::default(),
        };
        options.model = model.to_string();
        PolicyHandle::remote(options)
    } else {
        let params: SimPolicyParams = serde_json::from_value(value)?;
        Ok(PolicyHandle::simulated(params))
    }
}

/// Everything one expert-iteration launch needs besides its `c1`.
struct ClimbEnv<'a> {
    dir: &'a RunDir,
    config: &'a RunConfig,
    train: &'a TaskSet,
    val: &'a TaskSet,
    marker: &'a MarkerSpec,
    gen: GenerationConfig,
    c2: Real,
    tau: Real,
    lambda: Real,
    mode: EiMode,
    dataset_hash: &'a str,
}

impl ClimbEnv<'_> {
    /// Runs expert iteration at one curriculum point, persists its round
    /// log and best-policy snapshot, and builds the checkpoint record.
    fn launch(
        &self,
        stage: &str,
        input: &PolicyHandle,
        c1: Real,
    ) -> Result<(PolicyHandle, CurriculumRecord)> {
        log::info!("expert iteration at {stage}: c1 = {c1:.4}");
        let ctx = EiContext {
            train: self.train,
            val: self.val,
            marker: self.marker,
            gen: &self.gen,
            finetune: &self.config.finetune,
            reward: RewardParams { c1, c2: self.c2 },
            config: EiConfig {
                k: self.config.k,
                tau: self.tau,
                max_rounds: self.config.ei.max_rounds,
                min_improvement: self.config.ei.min_improvement,
                patience: self.config.ei.patience,
            },
            mode: self.mode,
            lambda: self.lambda,
            seed: self.config.seed,
            parallelism: self.config.parallelism,
            eval_draws: self.config.ei.eval_draws,
        };
        let outcome = run_expert_iteration(input.clone(), &ctx, |_, _| Ok(()))?;
        let mut round_log = String::new();
        for round in &outcome.rounds {
            round_log.push_str(&serde_json::to_string(round)?);
            round_log.push('\n');
        }
        write_atomic(&self.dir.path(&format!("ei/{stage}.jsonl")), round_log.as_bytes())?;
        let snapshot_path = self.dir.write_policy(stage, &outcome.policy)?;

        // Validation draws are keyed by (seed, "val", task, draw) alone, so
        // this re-evaluation reproduces the best round's numbers exactly.
        let report = ctx.evaluate_val(&outcome.policy)?.report(&[self.lambda])?;
        let record = CurriculumRecord {
            c1,
            c2: self.c2,
            f: report.f(self.lambda),
            acc: report.acc,
            pre: report.pre,
            idk: report.idk,
            idk_acc: report.idk_acc,
            ei_rounds: outcome.rounds.len() as u32 - 1,
            policy_snapshot_path: snapshot_path,
            dataset_hash: self.dataset_hash.to_string(),
        };
        Ok((outcome.policy, record))
    }
}

/// Drives hill-climb steps to completion, launching expert iteration for
/// every grid point the search wants evaluated. Each launch starts from the
/// policy of the point the search currently stands on (`anchor`).
fn drive_climb(
    env: &ClimbEnv<'_>,
    state: &mut CurriculumState,
    policies: &mut BTreeMap<i32, PolicyHandle>,
    records: &mut Vec<CurriculumRecord>,
    first_anchor: &PolicyHandle,
) -> Result<CurriculumStatus> {
    let budget = state.launch_budget() * 2 + 2;
    for _ in 0..budget {
        let anchor = state.current;
        let status = state.hill_climb_step(|index, c1| {
            let input = match policies.get(&anchor) {
                Some(policy) => policy.clone(),
                None => first_anchor.clone(),
            };
            let (policy, record) = env.launch(&stage_name(index), &input, c1)?;
            let f = record.f;
            env.dir.append_record(records, record)?;
            policies.insert(index, policy);
            Ok(f)
        })?;
        if status != CurriculumStatus::Running {
            return Ok(status);
        }
    }
    unreachable!("hill climb failed to terminate within the move budget");
}

fn meta_for(
    config: &RunConfig,
    data: &LoadedData,
    init: Option<InitMeta>,
    curriculum: Option<CurriculumMeta>,
) -> RunMeta {
    RunMeta {
        name: config.name.clone(),
        mode: config.mode,
        seed: config.seed,
        lambda: config.lambda,
        k: config.k,
        backend: config.backend.label(),
        dataset_hash: data.hash.clone(),
        init,
        curriculum,
        curriculum_status: None,
    }
}

fn curriculum_meta(
    state: &CurriculumState,
    mu: Real,
    sigma: Real,
    c2: Real,
    tau: Real,
) -> CurriculumMeta {
    let (lo, hi) = state.domain();
    CurriculumMeta {
        mu,
        sigma,
        c1_start: state.c1_at(0),
        d: state.step(),
        c1_lo: lo,
        c1_hi: hi,
        c2,
        tau,
    }
}

/// Executes a configured run end to end and derives its reports.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let dir = RunDir::new(&config.out);
    fs::create_dir_all(&dir.root)?;
    let _lock = RunLock::acquire(&dir.root)?;
    dir.create_layout()?;
    write_atomic(&dir.path(CONFIG_FILE), config.to_toml_string().as_bytes())?;

    let data = prepare_data(config, &dir)?;
    let marker = config.marker_spec();
    let gen = config.generation_config();
    let base = base_policy(config)?;
    dir.write_policy("base", &base)?;

    let ctx = PipelineContext {
        train: &data.train,
        val: &data.val,
        marker: &marker,
        gen,
        finetune: config.finetune,
        k: config.k,
        seed: config.seed,
        parallelism: config.parallelism,
        eval_draws: config.ei.eval_draws,
    };

    let final_policy = match config.mode {
        RunMode::AutoCei => run_curriculum(config, &dir, &data, &ctx, &base, true)?,
        RunMode::NoCurriculum => run_curriculum(config, &dir, &data, &ctx, &base, false)?,
        RunMode::RTuning => run_r_tuning(config, &dir, &data, &ctx, &base)?,
        RunMode::VanillaEi => run_vanilla(config, &dir, &data, &ctx, &base)?,
    };

    write_test_outcomes(config, &dir, &data, &marker, &gen, &final_policy)?;
    let report = emit_reports(&dir.root)?;
    Ok(RunSummary { run_dir: dir.root.clone(), report })
}

/// Refusal-aware initialization, reward calibration, then either the full
/// hill climb (`climb = true`) or a single launch at the calibration point.
fn run_curriculum(
    config: &RunConfig,
    dir: &RunDir,
    data: &LoadedData,
    ctx: &PipelineContext<'_>,
    base: &PolicyHandle,
    climb: bool,
) -> Result<PolicyHandle> {
    let init = initialise_policy(base, ctx, &config.init)?;
    dir.write_policy("init", &init.policy)?;
    let init_meta = InitMeta {
        sft_val_accuracy: init.sft_val_accuracy,
        cycles: init.cycles,
        refusal_rate: init.refusal_rate,
        floor_reached: init.floor_reached,
    };

    let stats = ctx.evaluate_val(&init.policy)?.length_stats()?;
    let reward = calibrate(&stats)?;
    let tau = choose_tau(init.sft_val_accuracy);
    let mut state = CurriculumState::from_stats(stats.mu, stats.sigma, config.lambda)?;
    log::info!(
        "calibration: mu = {:.4}, sigma = {:.4}, c2 = {:.6}, step = {:.4}, tau = {:.4}",
        stats.mu,
        stats.sigma,
        reward.c2,
        state.step(),
        tau
    );

    let mut meta = meta_for(
        config,
        data,
        Some(init_meta),
        Some(curriculum_meta(&state, stats.mu, stats.sigma, reward.c2, tau)),
    );
    dir.write_meta(&meta)?;

    let env = ClimbEnv {
        dir,
        config,
        train: &data.train,
        val: &data.val,
        marker: ctx.marker,
        gen: ctx.gen,
        c2: reward.c2,
        tau,
        lambda: config.lambda,
        mode: EiMode::RewardWeighted,
        dataset_hash: &data.hash,
    };
    let mut policies: BTreeMap<i32, PolicyHandle> = BTreeMap::new();
    let mut records: Vec<CurriculumRecord> = Vec::new();

    let status = if climb {
        drive_climb(&env, &mut state, &mut policies, &mut records, &init.policy)?
    } else {
        let (policy, record) = env.launch(&stage_name(0), &init.policy, state.c1_at(0))?;
        state.record(0, record.f);
        dir.append_record(&mut records, record)?;
        policies.insert(0, policy);
        CurriculumStatus::Converged
    };

    meta.curriculum_status = Some(status);
    dir.write_meta(&meta)?;

    let (best_c1, best_f) = state.best();
    let best_index = state.index_of(best_c1).expect("best c1 lies on the grid");
    log::info!(
        "curriculum {status:?}: best c1 = {best_c1:.4} (f = {best_f:.6}) after {} launches",
        state.launches()
    );
    Ok(policies[&best_index].clone())
}

/// Refusal-aware initialization only.
fn run_r_tuning(
    config: &RunConfig,
    dir: &RunDir,
    data: &LoadedData,
    ctx: &PipelineContext<'_>,
    base: &PolicyHandle,
) -> Result<PolicyHandle> {
    let init = initialise_policy(base, ctx, &config.init)?;
    dir.write_policy("init", &init.policy)?;
    let init_meta = InitMeta {
        sft_val_accuracy: init.sft_val_accuracy,
        cycles: init.cycles,
        refusal_rate: init.refusal_rate,
        floor_reached: init.floor_reached,
    };
    dir.write_meta(&meta_for(config, data, Some(init_meta), None))?;
    write_atomic(&dir.path(CURRICULUM_FILE), b"")?;
    Ok(init.policy)
}

/// Plain oracle SFT followed by correct-only expert iteration: the
/// assertive baseline with no refusal training and no reward shaping.
fn run_vanilla(
    config: &RunConfig,
    dir: &RunDir,
    data: &LoadedData,
    ctx: &PipelineContext<'_>,
    base: &PolicyHandle,
) -> Result<PolicyHandle> {
    let sft = base.finetune(
        &oracle_dataset(&data.train, ctx.marker)?,
        &data.train,
        ctx.marker,
        &config.finetune,
    )?;
    dir.write_policy("init", &sft)?;
    let sft_val_accuracy = ctx.evaluate_val(&sft)?.accuracy();
    let tau = choose_tau(sft_val_accuracy);
    let mut meta = meta_for(config, data, None, None);
    dir.write_meta(&meta)?;

    let env = ClimbEnv {
        dir,
        config,
        train: &data.train,
        val: &data.val,
        marker: ctx.marker,
        gen: ctx.gen,
        // Correct-only rewards never evaluate the refusal curve; the
        // checkpoint carries zeros to say "uncalibrated".
        c2: 0.0,
        tau,
        lambda: config.lambda,
        mode: EiMode::CorrectOnly,
        dataset_hash: &data.hash,
    };
    let mut records = Vec::new();
    let (policy, record) = env.launch(&stage_name(0), &sft, 0.0)?;
    dir.append_record(&mut records, record)?;
    meta.curriculum_status = Some(CurriculumStatus::Converged);
    dir.write_meta(&meta)?;
    Ok(policy)
}

/// Final-policy test evaluation, persisted row by row so curves and reports
/// can be rebuilt without re-sampling.
fn write_test_outcomes(
    config: &RunConfig,
    dir: &RunDir,
    data: &LoadedData,
    marker: &MarkerSpec,
    gen: &GenerationConfig,
    policy: &PolicyHandle,
) -> Result<()> {
    let result = evaluate_policy(
        policy,
        &data.test,
        marker,
        gen,
        config.curve.draws,
        &StreamKey::new(config.seed, "test"),
        config.parallelism,
    )?;
    let mut body = String::new();
    for record in result.records() {
        body.push_str(&serde_json::to_string(&record)?);
        body.push('\n');
    }
    write_atomic(&dir.path(TEST_OUTCOMES_FILE), body.as_bytes())
}

/// Derives `report.json`, `curves.csv`, and `summary.md` from the persisted
/// artifacts. Idempotent; errors with the list of missing artifacts if the
/// run has not progressed far enough.
pub fn emit_reports(run_dir: &Path) -> Result<RunReport> {
    let dir = RunDir::new(run_dir);
    let missing = dir.missing_artifacts();
    if !missing.is_empty() {
        return Err(Error::IncompleteRun(missing));
    }
    let meta = dir.read_meta()?;
    let config = dir.read_config()?;
    let records = dir.read_records()?;
    let test_tasks = TaskSet::from_jsonl(&dir.path("data/test.jsonl"))?;
    let outcome_records: Vec<OutcomeRecord> = read_jsonl(&dir.path(TEST_OUTCOMES_FILE))?;

    let mut outcomes: Vec<Outcome> = Vec::with_capacity(outcome_records.len());
    let mut difficulty_pairs: Vec<(Outcome, u32)> = Vec::with_capacity(outcome_records.len());
    for record in &outcome_records {
        let outcome = record.to_outcome()?;
        let task = test_tasks
            .get(&record.task_id)
            .ok_or_else(|| Error::UnknownTaskId(record.task_id.clone()))?;
        difficulty_pairs.push((outcome, task.optimal_steps));
        outcomes.push(outcome);
    }
    let counts = OutcomeCounts::tally(&outcomes);
    let test_report = crate::metrics::report_from_counts(&counts, &[meta.lambda])?;
    let test = TestMetrics {
        n: outcomes.len(),
        acc: test_report.acc,
        pre: test_report.pre,
        idk: test_report.idk,
        idk_acc: test_report.idk_acc,
        hallucination_rate: test_report.hallucination_rate,
        f: test_report.f(meta.lambda),
    };

    // Hardest-supported-bin curves over the task's optimal step count.
    let bins = length_binned_rates::<Real>(
        &difficulty_pairs,
        config.curve.bin_width,
        config.curve.min_support,
    );
    write_atomic(&dir.path(CURVES_FILE), curves_to_csv(&bins)?.as_bytes())?;

    // Best checkpoint under the report's lambda, ties to the larger c1.
    let best = records
        .iter()
        .map(|r| {
            let mut rescored = r.clone();
            rescored.f = objective(r.pre, r.idk, meta.lambda);
            rescored
        })
        .max_by(|a, b| a.f.total_cmp(&b.f).then_with(|| a.c1.total_cmp(&b.c1)));

    let final_policy = match meta.mode {
        RunMode::RTuning => "policies/policy_init.json".to_string(),
        _ => {
            let best = best
                .as_ref()
                .ok_or_else(|| Error::IncompleteRun(vec![format!("{CURRICULUM_FILE} records")]))?;
            best.policy_snapshot_path.clone()
        }
    };

    let report = RunReport {
        name: meta.name.clone(),
        mode: meta.mode,
        seed: meta.seed,
        lambda: meta.lambda,
        dataset_hash: meta.dataset_hash.clone(),
        launches: records.len(),
        curriculum_status: meta.curriculum_status,
        init: meta.init,
        calibration: meta.curriculum,
        best,
        final_policy,
        test,
    };
    let mut body = serde_json::to_string_pretty(&report)?;
    body.push('\n');
    write_atomic(&dir.path(REPORT_FILE), body.as_bytes())?;
    write_atomic(&dir.path(SUMMARY_FILE), render_summary(&report, &records).as_bytes())?;
    Ok(report)
}

fn render_summary(report: &RunReport, records: &[CurriculumRecord]) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "# {}\n", report.name);
    let _ = writeln!(s, "- mode: {}", report.mode.as_str());
    let _ = writeln!(s, "- seed: {}", report.seed);
    let _ = writeln!(s, "- lambda: {:.6}", report.lambda);
    let _ = writeln!(s, "- dataset: {}", report.dataset_hash);
    let _ = writeln!(s, "- expert-iteration launches: {}", report.launches);
    if let Some(init) = &report.init {
        let _ = writeln!(s, "\n## Initialization\n");
        let _ = writeln!(s, "- SFT validation accuracy: {:.6}", init.sft_val_accuracy);
        let _ = writeln!(
            s,
            "- cycles: {} (refusal floor {})",
            init.cycles,
            if init.floor_reached { "reached" } else { "not reached" }
        );
        let _ = writeln!(s, "- validation refusal rate: {:.6}", init.refusal_rate);
    }
    if let Some(cal) = &report.calibration {
        let _ = writeln!(s, "\n## Calibration\n");
        let _ = writeln!(s, "- mu: {:.6}, sigma: {:.6}", cal.mu, cal.sigma);
        let _ = writeln!(s, "- c1 domain: [{:.6}, {:.6}], step {:.6}", cal.c1_lo, cal.c1_hi, cal.d);
        let _ = writeln!(s, "- c2: {:.6}, tau: {:.6}", cal.c2, cal.tau);
    }
    let _ = writeln!(s, "\n## Curriculum\n");
    if records.is_empty() {
        let _ = writeln!(s, "No curriculum points were launched in this mode.");
    } else {
        let _ = writeln!(s, "| c1 | f | acc | pre | idk | idk_acc | ei_rounds |");
        let _ = writeln!(s, "|---:|---:|---:|---:|---:|---:|---:|");
        for r in records {
            let _ = writeln!(
                s,
                "| {:.6} | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} | {} |",
                r.c1, r.f, r.acc, r.pre, r.idk, r.idk_acc, r.ei_rounds
            );
        }
        if let Some(best) = &report.best {
            let _ =
                writeln!(s, "\nBest point at this lambda: c1 = {:.6}, f = {:.6}.", best.c1, best.f);
        }
    }
    let _ = writeln!(s, "\n## Test\n");
    let _ = writeln!(s, "- responses: {}", report.test.n);
    let _ = writeln!(s, "- accuracy: {:.6}", report.test.acc);
    let _ = writeln!(s, "- precision: {:.6}", report.test.pre);
    let _ = writeln!(s, "- refusal rate: {:.6}", report.test.idk);
    let _ = writeln!(s, "- refusal embedded accuracy: {:.6}", report.test.idk_acc);
    let _ = writeln!(s, "- hallucination rate: {:.6}", report.test.hallucination_rate);
    let _ = writeln!(s, "- objective f: {:.6}", report.test.f);
    s
}

/// Continues or re-scores a checkpointed run.
///
/// Completed checkpoint records are re-scored from their stored `pre` and
/// `idk` under `new_lambda` (if given) without relaunching expert
/// iteration. A run whose search finished only gets its reports rebuilt; an
/// interrupted run continues the hill climb from the best visited point.
pub fn resume(run_dir: &Path, new_lambda: Option<Real>) -> Result<ResumeSummary> {
    let dir = RunDir::new(run_dir);
    let missing: Vec<String> = [CONFIG_FILE, META_FILE, CURRICULUM_FILE]
        .iter()
        .filter(|rel| !dir.path(rel).is_file())
        .map(|rel| rel.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteRun(missing));
    }
    let _lock = RunLock::acquire(&dir.root)?;

    let mut meta = dir.read_meta()?;
    let config = dir.read_config()?;
    let lambda = new_lambda.unwrap_or(meta.lambda);
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange { what: "lambda", value: lambda });
    }
    let cal = meta.curriculum.ok_or_else(|| {
        Error::ResumeMismatch(format!(
            "mode {} checkpoints no curriculum to resume",
            meta.mode.as_str()
        ))
    })?;

    let data = load_run_data(&dir)?;
    if data.hash != meta.dataset_hash {
        return Err(Error::ResumeMismatch(format!(
            "dataset content hash changed: expected {}, found {}",
            meta.dataset_hash, data.hash
        )));
    }

    let mut state =
        CurriculumState::with_geometry(cal.c1_start, cal.d, cal.c1_lo, cal.c1_hi, lambda);
    let mut records = dir.read_records()?;
    let mut policies: BTreeMap<i32, PolicyHandle> = BTreeMap::new();
    for record in &records {
        let index = state.index_of(record.c1).ok_or_else(|| {
            Error::ResumeMismatch(format!(
                "checkpointed c1 = {} lies off the run's grid",
                record.c1
            ))
        })?;
        if record.dataset_hash != meta.dataset_hash {
            return Err(Error::ResumeMismatch(format!(
                "checkpoint at c1 = {} was built from a different dataset",
                record.c1
            )));
        }
        state.record(index, objective(record.pre, record.idk, lambda));
        policies.insert(
            index,
            load_policy_snapshot(&dir.path(&record.policy_snapshot_path), Some(&config.backend))?,
        );
    }
    if records.is_empty() {
        return Err(Error::IncompleteRun(vec![format!("{CURRICULUM_FILE} records")]));
    }

    let (best_c1, _) = state.best();
    let best_index = state.index_of(best_c1).expect("best c1 lies on the grid");
    state.current = best_index;

    let launches_before = records.len();
    if meta.curriculum_status.is_none() {
        // Interrupted search: continue climbing from the best visited point.
        let marker = config.marker_spec();
        let env = ClimbEnv {
            dir: &dir,
            config: &config,
            train: &data.train,
            val: &data.val,
            marker: &marker,
            gen: config.generation_config(),
            c2: cal.c2,
            tau: cal.tau,
            lambda,
            mode: EiMode::RewardWeighted,
            dataset_hash: &data.hash,
        };
        let anchor = policies[&best_index].clone();
        let status = drive_climb(&env, &mut state, &mut policies, &mut records, &anchor)?;
        meta.curriculum_status = Some(status);
    }
    let new_launches = records.len() - launches_before;

    meta.lambda = lambda;
    dir.write_meta(&meta)?;

    // The best point may have moved under the new lambda; refresh the final
    // test evaluation from its snapshot.
    let (best_c1, _) = state.best();
    let best_index = state.index_of(best_c1).expect("best c1 lies on the grid");
    let final_policy = policies[&best_index].clone();
    let marker = config.marker_spec();
    let gen = config.generation_config();
    write_test_outcomes(&config, &dir, &data, &marker, &gen, &final_policy)?;

    let report = emit_reports(&dir.root)?;
    Ok(ResumeSummary { run_dir: dir.root.clone(), lambda, new_launches, report })
}

/// One-off evaluation of a policy snapshot against a task file; serves the
/// `eval` subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub n: usize,
    pub acc: Real,
    pub pre: Real,
    pub idk: Real,
    pub idk_acc: Real,
    pub hallucination_rate: Real,
    pub f: Real,
    pub mean_len: Real,
    pub sigma_len: Real,
}

pub fn evaluate_snapshot(
    policy_path: &Path,
    data_path: &Path,
    draws: usize,
    seed: u64,
    lambda: Real,
    parallelism: usize,
) -> Result<EvalSummary> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange { what: "lambda", value: lambda });
    }
    let policy = load_policy_snapshot(policy_path, None)?;
    let tasks = TaskSet::from_jsonl(data_path)?;
    let marker = crate::config::MarkerConfig::default().to_spec();
    let gen = GenerationConfig::default();
    let result = evaluate_policy(
        &policy,
        &tasks,
        &marker,
        &gen,
        draws,
        &StreamKey::new(seed, "eval"),
        parallelism,
    )?;
    let report = result.report(&[lambda])?;
    let stats = result.length_stats()?;
    Ok(EvalSummary {
        n: result.rows.len(),
        acc: report.acc,
        pre: report.pre,
        idk: report.idk,
        idk_acc: report.idk_acc,
        hallucination_rate: report.hallucination_rate,
        f: report.f(lambda),
        mean_len: stats.mu,
        sigma_len: stats.sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(mode: RunMode, out: &Path) -> RunConfig {
        let toml = format!(
            r#"
            name = "tiny"
            mode = "{}"
            seed = 7
            lambda = 0.2
            k = 4
            parallelism = 1
            out = {:?}

            [data.generate]
            sizes = [30, 20, 20]
            depths = "1..4"
            seed = 7

            [backend]
            kind = "simulated"
            epsilon = 0.25
            rho = 0.05
            theta = 3.0
            q = 0.3

            [ei]
            max_rounds = 3
            eval_draws = 2

            [init]
            max_cycles = 2

            [curve]
            draws = 4
            min_support = 10
            "#,
            mode.as_str(),
            out.to_str().unwrap(),
        );
        RunConfig::from_toml_str(&toml).unwrap()
    }

    #[test]
    fn atomic_write_replaces_content_and_leaves_no_temp() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.json");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
    }

    #[test]
    fn lock_excludes_concurrent_runs_until_released() {
        let tmp = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(tmp.path()).unwrap();
        match RunLock::acquire(tmp.path()) {
            Err(Error::RunLocked(path)) => assert!(path.ends_with(LOCK_FILE)),
            other => panic!("expected RunLocked, got {other:?}"),
        }
        drop(lock);
        RunLock::acquire(tmp.path()).unwrap();
    }

    #[test]
    fn stage_names_cover_negative_indices() {
        assert_eq!(stage_name(0), "c1_p0");
        assert_eq!(stage_name(3), "c1_p3");
        assert_eq!(stage_name(-2), "c1_m2");
        assert_eq!(stage_name(i32::MIN), format!("c1_m{}", 2_i64.pow(31)));
    }

    #[test]
    fn r_tuning_run_emits_reports_and_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let config = tiny_config(RunMode::RTuning, &out);
        let summary = run(&config).unwrap();
        assert_eq!(summary.report.launches, 0);
        assert!(summary.report.best.is_none());
        assert_eq!(summary.report.final_policy, "policies/policy_init.json");
        assert!(summary.report.init.unwrap().refusal_rate >= 0.0);
        for rel in REQUIRED_ARTIFACTS {
            assert!(out.join(rel).is_file(), "missing {rel}");
        }
        assert!(!out.join(LOCK_FILE).exists(), "lock must be released");

        let before = fs::read(out.join(REPORT_FILE)).unwrap();
        let report = emit_reports(&out).unwrap();
        assert_eq!(report, summary.report);
        assert_eq!(fs::read(out.join(REPORT_FILE)).unwrap(), before);
    }

    #[test]
    fn auto_cei_run_checkpoints_every_launch() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let config = tiny_config(RunMode::AutoCei, &out);
        let summary = run(&config).unwrap();
        let records: Vec<CurriculumRecord> = read_jsonl(&out.join(CURRICULUM_FILE)).unwrap();

        assert!(records.len() >= 2, "the climb must evaluate neighbors");
        assert_eq!(summary.report.launches, records.len());
        assert!(summary.report.curriculum_status.is_some());
        let best = summary.report.best.clone().unwrap();
        for r in &records {
            assert!(best.f >= r.f - 1e-12);
            assert!(out.join(&r.policy_snapshot_path).is_file());
            let stage = Path::new(&r.policy_snapshot_path)
                .file_stem()
                .unwrap()
                .to_str()
                .unwrap()
                .strip_prefix("policy_")
                .unwrap()
                .to_string();
            assert!(out.join(format!("ei/{stage}.jsonl")).is_file());
            assert_eq!(r.dataset_hash, summary.report.dataset_hash);
        }
        assert_eq!(best.policy_snapshot_path, summary.report.final_policy);

        let curves = fs::read_to_string(out.join(CURVES_FILE)).unwrap();
        assert!(curves.starts_with("bin_lo,bin_hi,error_rate,refusal_rate,n"));
        assert!(curves.lines().count() >= 2);
    }

    #[test]
    fn resume_rescoring_relaunches_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let config = tiny_config(RunMode::AutoCei, &out);
        run(&config).unwrap();
        let records_before = fs::read(out.join(CURRICULUM_FILE)).unwrap();
        let policies_before = fs::read_dir(out.join("policies")).unwrap().count();

        let resumed = resume(&out, Some(0.5)).unwrap();
        assert_eq!(resumed.new_launches, 0);
        assert_eq!(resumed.lambda, 0.5);
        assert_eq!(resumed.report.lambda, 0.5);
        assert_eq!(fs::read(out.join(CURRICULUM_FILE)).unwrap(), records_before);
        assert_eq!(fs::read_dir(out.join("policies")).unwrap().count(), policies_before);

        // The re-scored best must be the argmax of the stored records under
        // the new lambda.
        let records: Vec<CurriculumRecord> = read_jsonl(&out.join(CURRICULUM_FILE)).unwrap();
        let expected =
            records.iter().map(|r| objective(r.pre, r.idk, 0.5)).fold(f64::NEG_INFINITY, f64::max);
        assert!((resumed.report.best.unwrap().f - expected).abs() < 1e-12);
    }

    #[test]
    fn resume_rejects_tampered_data_and_foreign_modes() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        run(&tiny_config(RunMode::AutoCei, &out)).unwrap();
        let data_path = out.join("data/test.jsonl");
        let original = fs::read_to_string(&data_path).unwrap();
        let truncated = original.lines().take(5).collect::<Vec<_>>().join("\n") + "\n";
        fs::write(&data_path, truncated).unwrap();
        assert!(matches!(resume(&out, None), Err(Error::ResumeMismatch(_))));
        fs::write(&data_path, original).unwrap();
        assert!(resume(&out, None).is_ok());

        let out2 = tmp.path().join("run2");
        run(&tiny_config(RunMode::RTuning, &out2)).unwrap();
        assert!(matches!(resume(&out2, Some(0.5)), Err(Error::ResumeMismatch(_))));
    }

    #[test]
    fn vanilla_run_records_a_single_uncalibrated_point() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let summary = run(&tiny_config(RunMode::VanillaEi, &out)).unwrap();
        assert_eq!(summary.report.launches, 1);
        assert!(summary.report.calibration.is_none());
        let best = summary.report.best.unwrap();
        assert_eq!(best.c1, 0.0);
        assert_eq!(best.c2, 0.0);
    }

    #[test]
    fn emit_reports_names_missing_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        run(&tiny_config(RunMode::RTuning, &out)).unwrap();
        fs::remove_file(out.join(TEST_OUTCOMES_FILE)).unwrap();
        fs::remove_file(out.join(CURRICULUM_FILE)).unwrap();
        match emit_reports(&out) {
            Err(Error::IncompleteRun(missing)) => {
                assert_eq!(
                    missing,
                    vec![CURRICULUM_FILE.to_string(), TEST_OUTCOMES_FILE.to_string()]
                );
            }
            other => panic!("expected IncompleteRun, got {other:?}"),
        }
    }

    #[test]
    fn policy_snapshots_roundtrip_through_files() {
        let tmp = tempfile::tempdir().unwrap();
        let params = SimPolicyParams::new(0.1, 0.2, 3.0, 0.4);
        let handle = PolicyHandle::simulated(params.clone());
        let dir = RunDir::new(tmp.path());
        dir.create_layout().unwrap();
        let rel = dir.write_policy("base", &handle).unwrap();
        let loaded = load_policy_snapshot(&dir.path(&rel), None).unwrap();
        match loaded {
            PolicyHandle::Simulated(p) => assert_eq!(p, params),
            PolicyHandle::Remote(_) => panic!("expected a simulated policy"),
        }
    }
}
