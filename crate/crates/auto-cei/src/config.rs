//! Run configuration: a human-authored TOML file resolving to datasets, a
//! backend, a mode, and every tunable the pipeline exposes. Validation
//! collects every problem before failing so a bad config surfaces all its
//! errors in one pass.

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::MarkerSpec;
use crate::curriculum::InitOptions;
use crate::error::{Error, Result};
use crate::policy::{FinetuneOptions, GenerationConfig, RemoteOptions, SimPolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Full pipeline: refusal-aware init, reward calibration, hill climb.
    AutoCei,
    /// Plain SFT plus correct-only expert iteration (assertive baseline).
    VanillaEi,
    /// Refusal-aware initialization only.
    RTuning,
    /// Refusal-aware init plus a single expert iteration at the
    /// calibration point, without the hill climb.
    NoCurriculum,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::AutoCei => "auto_cei",
            RunMode::VanillaEi => "vanilla_ei",
            RunMode::RTuning => "r_tuning",
            RunMode::NoCurriculum => "no_curriculum",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    Keyword,
    Paragraph,
}

/// Step-marker selection; the default keyword is the rule-chain family's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkerConfig {
    pub kind: MarkerKind,
    pub word: String,
}

impl Default for MarkerConfig {
    fn default() -> Self {
        MarkerConfig { kind: MarkerKind::Keyword, word: "Since".to_string() }
    }
}

impl MarkerConfig {
    pub fn to_spec(&self) -> MarkerSpec {
        match self.kind {
            MarkerKind::Keyword => MarkerSpec::keyword(&self.word),
            MarkerKind::Paragraph => MarkerSpec::paragraph(),
        }
    }
}

/// Generator spec: task counts per split and the task-depth range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    /// Train, validation, and test sizes.
    pub sizes: [usize; 3],
    /// Inclusive depth range, e.g. `"1..8"`.
    pub depths: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub generate: Option<GenerateSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Simulated(SimPolicyParams),
    Remote(RemoteOptions),
}

impl BackendConfig {
    pub fn label(&self) -> String {
        match self {
            BackendConfig::Simulated(_) => "simulated".to_string(),
            BackendConfig::Remote(r) => format!("remote:{}", r.model),
        }
    }
}

/// Expert-iteration schedule (the resampling temperature is computed at run
/// time from the initial SFT accuracy, not configured).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EiSettings {
    pub max_rounds: u32,
    pub min_improvement: f64,
    pub patience: u32,
    /// Validation draws per task for stop decisions and checkpoints.
    pub eval_draws: usize,
}

impl Default for EiSettings {
    fn default() -> Self {
        EiSettings { max_rounds: 10, min_improvement: 0.005, patience: 2, eval_draws: 4 }
    }
}

/// Length-binned diagnostic curve settings (test split).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub bin_width: u32,
    /// Bins with fewer members are flagged low-support.
    pub min_support: usize,
    /// Test draws per task feeding the curves and the final report.
    pub draws: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig { bin_width: 1, min_support: 30, draws: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub mode: RunMode,
    pub seed: u64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Samples per task in collection phases.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Run directory to create.
    pub out: PathBuf,
    #[serde(default)]
    pub marker: MarkerConfig,
    pub data: DataConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub finetune: FinetuneOptions,
    #[serde(default)]
    pub ei: EiSettings,
    #[serde(default)]
    pub init: InitOptions,
    #[serde(default)]
    pub curve: CurveConfig,
}

fn default_lambda() -> f64 {
    0.2
}

fn default_k() -> usize {
    16
}

fn default_parallelism() -> usize {
    1
}

/// Parses an inclusive depth range: `"1..8"`, or a single depth `"3"`.
pub fn parse_depths(s: &str) -> std::result::Result<RangeInclusive<u32>, String> {
    let parse_one = |part: &str| {
        part.trim().parse::<u32>().map_err(|_| format!("invalid depth {part:?} in range {s:?}"))
    };
    let (lo, hi) = match s.split_once("..") {
        Some((lo, hi)) => (parse_one(lo)?, parse_one(hi)?),
        None => {
            let d = parse_one(s)?;
            (d, d)
        }
    };
    if lo < 1 {
        return Err(format!("depth range {s:?} must start at 1 or above"));
    }
    if hi < lo {
        return Err(format!("depth range {s:?} is empty"));
    }
    if hi > crate::env::MAX_DEPTH {
        return Err(format!(
            "depth range {s:?} exceeds the maximum supported depth {}",
            crate::env::MAX_DEPTH
        ));
    }
    Ok(lo..=hi)
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    pub fn marker_spec(&self) -> MarkerSpec {
        self.marker.to_spec()
    }

    /// The generation config with the run-level sample count filled in.
    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig { k: self.k, ..self.generation }
    }

    /// Checks every field and returns the full list of problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errors: Vec<String> = Vec::new();
        let mut require = |ok: bool, message: String| {
            if !ok {
                errors.push(message);
            }
        };

        require(!self.name.is_empty(), "name must not be empty".into());
        require(
            (0.0..=1.0).contains(&self.lambda),
            format!("lambda must lie in [0, 1], got {}", self.lambda),
        );
        require(self.k >= 1, "k must be >= 1".into());
        require(self.parallelism >= 1, "parallelism must be >= 1".into());
        require(
            !self.out.as_os_str().is_empty(),
            "out must name the run directory to create".into(),
        );
        if self.marker.kind == MarkerKind::Keyword {
            require(
                !self.marker.word.trim().is_empty(),
                "marker.word must not be empty for the keyword marker".into(),
            );
        }

        let has_paths =
            self.data.train.is_some() || self.data.val.is_some() || self.data.test.is_some();
        let has_all_paths =
            self.data.train.is_some() && self.data.val.is_some() && self.data.test.is_some();
        let mut max_depth = crate::env::MAX_DEPTH;
        match (&self.data.generate, has_paths) {
            (Some(_), true) => {
                require(
                    false,
                    "data: give either train/val/test paths or a generate spec, not both".into(),
                );
            }
            (None, false) => {
                require(false, "data: give train/val/test paths or a generate spec".into());
            }
            (None, true) => {
                require(has_all_paths, "data: train, val, and test paths must all be set".into());
            }
            (Some(spec), false) => {
                require(
                    spec.sizes.iter().all(|&n| n >= 1),
                    format!("data.generate.sizes must all be >= 1, got {:?}", spec.sizes),
                );
                match parse_depths(&spec.depths) {
                    Ok(range) => max_depth = *range.end(),
                    Err(message) => require(false, format!("data.generate.depths: {message}")),
                }
            }
        }

        match &self.backend {
            BackendConfig::Simulated(params) => {
                for e in params.validation_errors() {
                    require(false, format!("backend: {e}"));
                }
                require(
                    params.base.is_none(),
                    "backend: the simulated policy's base is set by the run, not configured".into(),
                );
                require(
                    params.t_max >= max_depth,
                    format!(
                        "backend.t_max ({}) must cover the maximum task depth ({max_depth})",
                        params.t_max
                    ),
                );
            }
            BackendConfig::Remote(options) => {
                require(!options.model.is_empty(), "backend.model must be set".into());
                require(options.max_in_flight >= 1, "backend.max_in_flight must be >= 1".into());
                require(options.max_attempts >= 1, "backend.max_attempts must be >= 1".into());
            }
        }

        require(
            self.generation.temperature >= 0.0,
            format!("generation.temperature must be >= 0, got {}", self.generation.temperature),
        );
        require(
            self.generation.top_p > 0.0 && self.generation.top_p <= 1.0,
            format!("generation.top_p must lie in (0, 1], got {}", self.generation.top_p),
        );
        require(
            (0.0..=1.0).contains(&self.finetune.eta),
            format!("finetune.eta must lie in [0, 1], got {}", self.finetune.eta),
        );
        require(
            (0.0..=1.0).contains(&self.finetune.epsilon_floor),
            format!(
                "finetune.epsilon_floor must lie in [0, 1], got {}",
                self.finetune.epsilon_floor
            ),
        );
        require(
            (0.0..=1.0).contains(&self.finetune.rho_cap),
            format!("finetune.rho_cap must lie in [0, 1], got {}", self.finetune.rho_cap),
        );
        require(self.ei.max_rounds >= 1, "ei.max_rounds must be >= 1".into());
        require(
            self.ei.min_improvement >= 0.0,
            format!("ei.min_improvement must be >= 0, got {}", self.ei.min_improvement),
        );
        require(self.ei.patience >= 1, "ei.patience must be >= 1".into());
        require(self.ei.eval_draws >= 1, "ei.eval_draws must be >= 1".into());
        require(
            (0.0..=1.0).contains(&self.init.refusal_floor),
            format!("init.refusal_floor must lie in [0, 1], got {}", self.init.refusal_floor),
        );
        require(self.init.max_cycles >= 1, "init.max_cycles must be >= 1".into());
        require(self.curve.bin_width >= 1, "curve.bin_width must be >= 1".into());
        require(self.curve.draws >= 1, "curve.draws must be >= 1".into());

        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errors))
        }
    }
}
