//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every field of
//! [`ExperimentConfig`] has a key; command-line `--set key=value` overrides
//! are applied after the file with the same parser.
//!
//! ```text
//! dataset.name = scene
//! dataset.train = data/scene_train.svm
//! dataset.test = data/scene_test.svm
//! algorithms = cips,poem,klcrm,aklcrm
//! seeds = 0..20
//! delta = 4
//! grid.poem = logspace(-6,0,8)
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dro_crm::objectives::{GammaRule, ObjectiveOptions};
use dro_crm::optim::OptimConfig;
use dro_crm::sim::{LoggerSpec, SplitSpec};
use dro_crm::svmlight::LabelBase;
use thiserror::Error;

use crate::experiment::Algorithm;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Syntax {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {message}")]
    BadValue { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        message: message.into(),
    }
}

// ── Value parsers ───────────────────────────────────────────────────────

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| bad(key, format!("cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(bad(key, format!("expected a boolean, got {value:?}"))),
    }
}

/// `10^linspace(lo, hi, n)`.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![10f64.powf(lo)],
        _ => (0..n)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64))
            .collect(),
    }
}

/// A comma-separated list of numbers, or `logspace(lo,hi,n)`.
pub fn parse_grid(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    let v = value.trim();
    let grid = if let Some(inner) = v.strip_prefix("logspace(").and_then(|s| s.strip_suffix(')')) {
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad(key, "logspace takes (lo, hi, count)"));
        }
        logspace(
            parse_num(key, parts[0])?,
            parse_num(key, parts[1])?,
            parse_num(key, parts[2])?,
        )
    } else {
        v.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse_num::<f64>(key, s.trim()))
            .collect::<Result<_, _>>()?
    };
    if grid.is_empty() {
        return Err(bad(key, "grid is empty"));
    }
    if let Some(g) = grid.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
        return Err(bad(key, format!("grid values must be finite and > 0, got {g}")));
    }
    Ok(grid)
}

/// `a..b` (half-open) or a comma-separated list.
pub fn parse_seeds(key: &str, value: &str) -> Result<Vec<u64>, ConfigError> {
    let v = value.trim();
    let seeds: Vec<u64> = if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (parse_num(key, a.trim())?, parse_num(key, b.trim())?);
        (a..b).collect()
    } else {
        v.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse_num(key, s.trim()))
            .collect::<Result<_, _>>()?
    };
    let distinct: BTreeSet<_> = seeds.iter().collect();
    if distinct.len() != seeds.len() {
        return Err(bad(key, "seeds must be distinct"));
    }
    Ok(seeds)
}

pub fn parse_deltas(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    let deltas: Vec<usize> = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s.trim()))
        .collect::<Result<_, _>>()?;
    if deltas.is_empty() || deltas.contains(&0) {
        return Err(bad(key, "replay counts must be a non-empty list of integers >= 1"));
    }
    Ok(deltas)
}

fn fmt_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_seeds(seeds: &[u64]) -> String {
    let contiguous = seeds.windows(2).all(|w| w[1] == w[0] + 1);
    match (seeds.first(), seeds.last()) {
        (Some(a), Some(b)) if contiguous && seeds.len() > 2 => format!("{a}..{}", b + 1),
        _ => fmt_list(seeds),
    }
}

// ── Configuration ───────────────────────────────────────────────────────

/// How policy parameters are initialised before optimisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Zeros,
    Logger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grids {
    pub poem: Vec<f64>,
    pub klcrm: Vec<f64>,
    pub aklcrm: Vec<f64>,
}

/// Cross-validation grids: 8 log-spaced points per algorithm.
pub fn default_grids() -> Grids {
    Grids {
        poem: logspace(-6.0, 0.0, 8),
        klcrm: logspace(-3.0, 4.0, 8),
        aklcrm: logspace(-6.0, 0.0, 8),
    }
}

impl Grids {
    pub fn for_algorithm(&self, algorithm: Algorithm) -> Option<&[f64]> {
        match algorithm {
            Algorithm::Cips => None,
            Algorithm::Poem => Some(&self.poem),
            Algorithm::KlCrm => Some(&self.klcrm),
            Algorithm::AklCrm => Some(&self.aklcrm),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset_name: String,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Share of the data held out for testing when no test file is given.
    pub test_frac: f64,
    pub label_base: LabelBase,
    pub bias: bool,
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    pub delta: usize,
    /// Replay count of the validation log; `None` uses `delta`.
    pub valid_delta: Option<usize>,
    pub split: SplitSpec,
    pub logger: LoggerSpec,
    pub grids: Grids,
    pub optim: OptimConfig,
    pub init: InitMode,
    pub objective: ObjectiveOptions,
    pub sweep_seeds: Vec<u64>,
    pub sweep_deltas: Vec<usize>,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_name: "dataset".into(),
            train_path: None,
            test_path: None,
            test_frac: 0.25,
            label_base: LabelBase::Auto,
            bias: true,
            algorithms: Algorithm::ALL.to_vec(),
            seeds: (0..20).collect(),
            delta: 4,
            valid_delta: None,
            split: SplitSpec::default(),
            logger: LoggerSpec::default(),
            grids: default_grids(),
            optim: OptimConfig::default(),
            init: InitMode::Zeros,
            objective: ObjectiveOptions::default(),
            sweep_seeds: (0..10).collect(),
            sweep_deltas: vec![1, 4, 16, 64],
            output: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_text(path: &Path, text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected key = value".into(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(path, &text)
    }

    /// Applies an override of the form `key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| bad(assignment, "overrides take the form key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "dataset.name" => self.dataset_name = value.to_string(),
            "dataset.train" => self.train_path = opt_path(value),
            "dataset.test" => self.test_path = opt_path(value),
            "dataset.test_frac" => self.test_frac = parse_num(key, value)?,
            "dataset.label_base" => {
                self.label_base = match value {
                    "auto" => LabelBase::Auto,
                    "0" | "zero" => LabelBase::Zero,
                    "1" | "one" => LabelBase::One,
                    _ => return Err(bad(key, "expected auto, 0 or 1")),
                }
            }
            "features.bias" => self.bias = parse_bool(key, value)?,
            "algorithms" => {
                self.algorithms = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| Algorithm::parse(s).ok_or_else(|| bad(key, format!("unknown algorithm {s:?}"))))
                    .collect::<Result<_, _>>()?;
                let distinct: BTreeSet<_> = self.algorithms.iter().collect();
                if distinct.len() != self.algorithms.len() {
                    return Err(bad(key, "algorithms listed twice"));
                }
            }
            "seeds" => self.seeds = parse_seeds(key, value)?,
            "delta" => self.delta = parse_num(key, value)?,
            "valid.delta" => {
                self.valid_delta = if value.is_empty() || value == "same" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "split.train_frac" => self.split.train_frac = parse_num(key, value)?,
            "split.logger_frac" => self.split.logger_frac = parse_num(key, value)?,
            "logger.l2" => self.logger.l2 = parse_num(key, value)?,
            "logger.alpha" => self.logger.alpha = parse_num(key, value)?,
            "logger.max_iters" => self.logger.optim.max_iters = parse_num(key, value)?,
            "grid.poem" => self.grids.poem = parse_grid(key, value)?,
            "grid.klcrm" => self.grids.klcrm = parse_grid(key, value)?,
            "grid.aklcrm" => self.grids.aklcrm = parse_grid(key, value)?,
            "optim.memory" => self.optim.memory = parse_num(key, value)?,
            "optim.max_iters" => self.optim.max_iters = parse_num(key, value)?,
            "optim.grad_tol" => self.optim.grad_tol = parse_num(key, value)?,
            "optim.f_tol" => self.optim.f_tol = parse_num(key, value)?,
            "optim.c1" => self.optim.c1 = parse_num(key, value)?,
            "optim.c2" => self.optim.c2 = parse_num(key, value)?,
            "optim.max_line_search_steps" => self.optim.max_line_search_steps = parse_num(key, value)?,
            "optim.box" => {
                self.optim.box_bound = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "optim.init" => {
                self.init = match value {
                    "zeros" => InitMode::Zeros,
                    "logger" => InitMode::Logger,
                    _ => return Err(bad(key, "expected zeros or logger")),
                }
            }
            "objective.gamma_rule" => {
                self.objective.gamma_rule = match value {
                    "sum_sq" => GammaRule::SumOfSquares,
                    "variance" => GammaRule::Variance,
                    _ => return Err(bad(key, "expected sum_sq or variance")),
                }
            }
            "objective.full_gradient" => self.objective.differentiate_weights = parse_bool(key, value)?,
            "sweep.seeds" => self.sweep_seeds = parse_seeds(key, value)?,
            "sweep.deltas" => self.sweep_deltas = parse_deltas(key, value)?,
            "output" => self.output = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.train_path.is_none() {
            return invalid("dataset.train is required".into());
        }
        if self.seeds.is_empty() {
            return invalid("at least one seed is required".into());
        }
        if self.delta == 0 || self.valid_delta == Some(0) {
            return invalid("replay counts must be >= 1".into());
        }
        if self.test_path.is_none() && !(self.test_frac > 0.0 && self.test_frac < 1.0) {
            return invalid(format!("dataset.test_frac must lie in (0, 1), got {}", self.test_frac));
        }
        if !(self.logger.alpha > 0.0) || !(self.logger.l2 >= 0.0) {
            return invalid("logger.alpha must be > 0 and logger.l2 >= 0".into());
        }
        self.split.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.optim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn valid_delta(&self) -> usize {
        self.valid_delta.unwrap_or(self.delta)
    }

    /// Every key with its current value, in the file format.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("dataset.name", self.dataset_name.clone());
        kv("dataset.train", path(&self.train_path));
        kv("dataset.test", path(&self.test_path));
        kv("dataset.test_frac", self.test_frac.to_string());
        kv(
            "dataset.label_base",
            match self.label_base {
                LabelBase::Auto => "auto",
                LabelBase::Zero => "0",
                LabelBase::One => "1",
            }
            .into(),
        );
        kv("features.bias", self.bias.to_string());
        kv(
            "algorithms",
            self.algorithms.iter().map(|a| a.name()).collect::<Vec<_>>().join(","),
        );
        kv("seeds", fmt_seeds(&self.seeds));
        kv("delta", self.delta.to_string());
        kv(
            "valid.delta",
            self.valid_delta.map_or_else(|| "same".into(), |d| d.to_string()),
        );
        kv("split.train_frac", self.split.train_frac.to_string());
        kv("split.logger_frac", self.split.logger_frac.to_string());
        kv("logger.l2", self.logger.l2.to_string());
        kv("logger.alpha", self.logger.alpha.to_string());
        kv("logger.max_iters", self.logger.optim.max_iters.to_string());
        kv("grid.poem", fmt_list(&self.grids.poem));
        kv("grid.klcrm", fmt_list(&self.grids.klcrm));
        kv("grid.aklcrm", fmt_list(&self.grids.aklcrm));
        kv("optim.memory", self.optim.memory.to_string());
        kv("optim.max_iters", self.optim.max_iters.to_string());
        kv("optim.grad_tol", self.optim.grad_tol.to_string());
        kv("optim.f_tol", self.optim.f_tol.to_string());
        kv("optim.c1", self.optim.c1.to_string());
        kv("optim.c2", self.optim.c2.to_string());
        kv(
            "optim.max_line_search_steps",
            self.optim.max_line_search_steps.to_string(),
        );
        kv(
            "optim.box",
            self.optim.box_bound.map_or_else(|| "none".into(), |b| b.to_string()),
        );
        kv(
            "optim.init",
            match self.init {
                InitMode::Zeros => "zeros",
                InitMode::Logger => "logger",
            }
            .into(),
        );
        kv(
            "objective.gamma_rule",
            match self.objective.gamma_rule {
                GammaRule::SumOfSquares => "sum_sq",
                GammaRule::Variance => "variance",
            }
            .into(),
        );
        kv(
            "objective.full_gradient",
            self.objective.differentiate_weights.to_string(),
        );
        kv("sweep.seeds", fmt_seeds(&self.sweep_seeds));
        kv("sweep.deltas", fmt_list(&self.sweep_deltas));
        kv("output", self.output.display().to_string());
        out
    }
}
