//! Benchmark pipeline.
//!
//! For every seed: split the pool into train and validation parts, fit the
//! logger on a small slice of train, log bandit feedback on both parts, then
//! for every algorithm and grid point fit a policy on the train log and keep
//! the one with the lowest IPS score on the validation log. The selected
//! policy is scored on the test set. The logger and a fully supervised
//! skyline are scored alongside.

use std::path::Path;
use std::time::Instant;

use dro_crm::objectives::{BanditLog, CrmObjective};
use dro_crm::optim::train_policy;
use dro_crm::policy::PolicyParams;
use dro_crm::sim::{
    evaluate_policy, fit_supervised, generate_bandit_log, ips_validation_score, split_dataset, stream_seed,
    train_logger, EvalMode, Split, SplitSpec, SupervisedDataset,
};
use dro_crm::svmlight::{load_joint, LoadOptions};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, InitMode};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] dro_crm::Error),
    #[error("invalid DRO_CRM_THREADS value {0:?}")]
    Threads(String),
    #[error("cannot build worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

// ── Algorithms ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Algorithm {
    Cips,
    Poem,
    KlCrm,
    AklCrm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Cips, Algorithm::Poem, Algorithm::KlCrm, Algorithm::AklCrm];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Cips => "cips",
            Algorithm::Poem => "poem",
            Algorithm::KlCrm => "klcrm",
            Algorithm::AklCrm => "aklcrm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s.to_ascii_lowercase())
    }

    /// Name of the cross-validated hyper-parameter.
    pub fn hyper_name(self) -> &'static str {
        match self {
            Algorithm::Cips => "",
            Algorithm::Poem => "lambda",
            Algorithm::KlCrm => "gamma",
            Algorithm::AklCrm => "epsilon",
        }
    }

    pub fn objective(self, hyper: Option<f64>) -> CrmObjective {
        let h = hyper.unwrap_or(f64::NAN);
        match self {
            Algorithm::Cips => CrmObjective::Cips,
            Algorithm::Poem => CrmObjective::Poem { lambda: h },
            Algorithm::KlCrm => CrmObjective::KlCrm { gamma: h },
            Algorithm::AklCrm => CrmObjective::AklCrm { epsilon: h },
        }
    }
}

pub const LOGGER_ROW: &str = "logger";
pub const SKYLINE_ROW: &str = "skyline";

/// Sort key of a result row label: baselines first, then algorithms in
/// declaration order.
pub fn row_order(label: &str) -> usize {
    match label {
        LOGGER_ROW => 0,
        SKYLINE_ROW => 1,
        other => 2 + Algorithm::parse(other).map_or(Algorithm::ALL.len(), |a| a as usize),
    }
}

// ── Rows ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub algorithm: String,
    pub seed: u64,
    pub delta: usize,
    pub hyper_name: String,
    pub hyper: Option<f64>,
    pub expected_loss: f64,
    pub greedy_loss: f64,
    /// `ok`, or `failed: <diagnostic>`.
    pub status: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn failed(cfg: &ExperimentConfig, label: &str, seed: u64, delta: usize, err: impl std::fmt::Display) -> Self {
        Self {
            dataset: cfg.dataset_name.clone(),
            algorithm: label.to_string(),
            seed,
            delta,
            hyper_name: Algorithm::parse(label).map_or("", |a| a.hyper_name()).to_string(),
            hyper: None,
            expected_loss: f64::NAN,
            greedy_loss: f64::NAN,
            status: format!("failed: {}", err.to_string().replace(['\n', ','], " ")),
        }
    }
}

/// Validation score of one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridScore {
    pub dataset: String,
    pub algorithm: String,
    pub seed: u64,
    pub delta: usize,
    pub hyper: Option<f64>,
    pub ips_score: f64,
    pub iterations: usize,
    pub termination: String,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub algorithm: String,
    pub seed: u64,
    pub delta: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub grid_scores: Vec<GridScore>,
    pub timings: Vec<Timing>,
}

impl RunOutput {
    fn extend(&mut self, other: RunOutput) {
        self.rows.extend(other.rows);
        self.grid_scores.extend(other.grid_scores);
        self.timings.extend(other.timings);
    }

    /// Orders everything by (row label, seed, replay count).
    pub fn sort(&mut self) {
        self.rows.sort_by_key(|r| (row_order(&r.algorithm), r.seed, r.delta));
        self.grid_scores.sort_by(|a, b| {
            (row_order(&a.algorithm), a.seed, a.delta)
                .cmp(&(row_order(&b.algorithm), b.seed, b.delta))
                .then(a.hyper.unwrap_or(0.0).total_cmp(&b.hyper.unwrap_or(0.0)))
        });
        self.timings.sort_by_key(|t| (row_order(&t.algorithm), t.seed, t.delta));
    }
}

// ── Data ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Data {
    /// Examples available for train and validation.
    pub pool: SupervisedDataset,
    pub test: SupervisedDataset,
}

const HOLDOUT_STREAM: u64 = 0x7e57;
const SPLIT_STREAM: u64 = 10;
const TRAIN_LOG_STREAM: u64 = 11;
const VALID_LOG_STREAM: u64 = 12;

/// Seed-independent test holdout used when no test file is configured.
pub fn holdout(ds: &SupervisedDataset, test_frac: f64) -> Result<Data> {
    let n = ds.len();
    if n < 3 {
        return Err(
            dro_crm::Error::Contract(format!("need at least 3 examples to hold out a test set, got {n}")).into(),
        );
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[HOLDOUT_STREAM])));
    let n_test = ((test_frac * n as f64).round() as usize).clamp(1, n - 2);
    let (test, pool) = order.split_at(n_test);
    Ok(Data {
        pool: ds.subset(pool),
        test: ds.subset(test),
    })
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    let train = cfg
        .train_path
        .as_deref()
        .ok_or_else(|| ConfigError::Invalid("dataset.train is required".into()))?;
    let options = LoadOptions {
        label_base: cfg.label_base,
        ..Default::default()
    };
    let data = match cfg.test_path.as_deref() {
        Some(test) => {
            let mut sets = load_joint(&[train, test], &options)?;
            let test = sets.pop().expect("two datasets loaded");
            Data {
                pool: sets.pop().expect("two datasets loaded"),
                test,
            }
        }
        None => holdout(&load_joint(&[train], &options)?.remove(0), cfg.test_frac)?,
    };
    Ok(if cfg.bias {
        Data {
            pool: data.pool.with_bias(),
            test: data.test.with_bias(),
        }
    } else {
        data
    })
}

// ── Per-seed pipeline ───────────────────────────────────────────────────

pub struct SeedContext {
    pub seed: u64,
    pub delta: usize,
    pub split: Split,
    pub logger: PolicyParams,
    pub train_log: BanditLog,
    pub valid_log: BanditLog,
}

pub fn prepare_seed(cfg: &ExperimentConfig, data: &Data, seed: u64, delta: usize) -> Result<SeedContext> {
    let split = split_dataset(
        &data.pool,
        &SplitSpec {
            seed: stream_seed(&[seed, SPLIT_STREAM]),
            ..cfg.split
        },
    )?;
    let logger = train_logger(&split.logger, &cfg.logger)?;
    let train_log = generate_bandit_log(&logger, &split.train, delta, stream_seed(&[seed, TRAIN_LOG_STREAM]))?;
    let valid_log = generate_bandit_log(
        &logger,
        &split.valid,
        cfg.valid_delta(),
        stream_seed(&[seed, VALID_LOG_STREAM]),
    )?;
    Ok(SeedContext {
        seed,
        delta,
        split,
        logger,
        train_log,
        valid_log,
    })
}

fn score_row(
    cfg: &ExperimentConfig,
    data: &Data,
    ctx: &SeedContext,
    label: &str,
    hyper: Option<f64>,
    params: &PolicyParams,
) -> Result<ResultRow> {
    Ok(ResultRow {
        dataset: cfg.dataset_name.clone(),
        algorithm: label.to_string(),
        seed: ctx.seed,
        delta: ctx.delta,
        hyper_name: Algorithm::parse(label).map_or("", |a| a.hyper_name()).to_string(),
        hyper,
        expected_loss: evaluate_policy(params, &data.test, EvalMode::Expected)?,
        greedy_loss: evaluate_policy(params, &data.test, EvalMode::Greedy)?,
        status: "ok".into(),
    })
}

/// Rows for the logger and the fully supervised skyline (`alpha = 1`).
pub fn baseline_rows(cfg: &ExperimentConfig, data: &Data, ctx: &SeedContext) -> RunOutput {
    let mut out = RunOutput::default();
    let start = Instant::now();
    out.rows.push(
        score_row(cfg, data, ctx, LOGGER_ROW, None, &ctx.logger)
            .unwrap_or_else(|e| ResultRow::failed(cfg, LOGGER_ROW, ctx.seed, ctx.delta, e)),
    );
    let skyline = fit_supervised(&ctx.split.train, cfg.logger.l2, &cfg.logger.optim)
        .map_err(ExperimentError::from)
        .and_then(|p| score_row(cfg, data, ctx, SKYLINE_ROW, None, &p));
    out.rows
        .push(skyline.unwrap_or_else(|e| ResultRow::failed(cfg, SKYLINE_ROW, ctx.seed, ctx.delta, e)));
    out.timings.push(Timing {
        algorithm: "baselines".into(),
        seed: ctx.seed,
        delta: ctx.delta,
        seconds: start.elapsed().as_secs_f64(),
    });
    out
}

/// Fits every grid point, selects the lowest validation IPS score (the
/// first one on ties) and scores the winner on the test set.
pub fn run_cell(cfg: &ExperimentConfig, data: &Data, ctx: &SeedContext, algorithm: Algorithm) -> RunOutput {
    let start = Instant::now();
    let grid: Vec<Option<f64>> = match cfg.grids.for_algorithm(algorithm) {
        Some(g) => g.iter().map(|&h| Some(h)).collect(),
        None => vec![None],
    };
    let theta0 = match cfg.init {
        InitMode::Zeros => PolicyParams::zeros(ctx.logger.labels(), ctx.logger.features()),
        InitMode::Logger => ctx.logger.clone(),
    };
    let mut scores = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, PolicyParams)> = None;
    let mut last_error = None;
    for (i, &hyper) in grid.iter().enumerate() {
        let fitted = train_policy(
            algorithm.objective(hyper),
            &ctx.train_log,
            cfg.objective,
            &theta0,
            &cfg.optim,
        )
        .and_then(|(theta, trace)| Ok((ips_validation_score(&theta, &ctx.valid_log)?, theta, trace)));
        let (score, iterations, termination) = match fitted {
            Ok((score, theta, trace)) => {
                if score.is_finite() && best.as_ref().is_none_or(|(_, s, _)| score < *s) {
                    best = Some((i, score, theta));
                }
                (score, trace.iterations(), trace.termination.as_str().to_string())
            }
            Err(e) => {
                let msg = e.to_string();
                last_error = Some(msg.clone());
                (f64::NAN, 0, format!("error: {}", msg.replace(['\n', ','], " ")))
            }
        };
        scores.push(GridScore {
            dataset: cfg.dataset_name.clone(),
            algorithm: algorithm.name().into(),
            seed: ctx.seed,
            delta: ctx.delta,
            hyper,
            ips_score: score,
            iterations,
            termination,
            selected: false,
        });
    }
    let row = match best {
        Some((i, _, theta)) => {
            scores[i].selected = true;
            score_row(cfg, data, ctx, algorithm.name(), grid[i], &theta)
                .unwrap_or_else(|e| ResultRow::failed(cfg, algorithm.name(), ctx.seed, ctx.delta, e))
        }
        None => ResultRow::failed(
            cfg,
            algorithm.name(),
            ctx.seed,
            ctx.delta,
            last_error.unwrap_or_else(|| "no grid point produced a finite validation score".into()),
        ),
    };
    RunOutput {
        rows: vec![row],
        grid_scores: scores,
        timings: vec![Timing {
            algorithm: algorithm.name().into(),
            seed: ctx.seed,
            delta: ctx.delta,
            seconds: start.elapsed().as_secs_f64(),
        }],
    }
}

/// One algorithm on one seed, end to end.
pub fn run_single(cfg: &ExperimentConfig, data: &Data, algorithm: Algorithm, seed: u64) -> ResultRow {
    match prepare_seed(cfg, data, seed, cfg.delta) {
        Ok(ctx) => run_cell(cfg, data, &ctx, algorithm).rows.remove(0),
        Err(e) => ResultRow::failed(cfg, algorithm.name(), seed, cfg.delta, e),
    }
}

// ── Orchestration ───────────────────────────────────────────────────────

/// Worker pool capped by `DRO_CRM_THREADS` (machine parallelism when unset).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("DRO_CRM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or(ExperimentError::Threads(v))?;
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?)
}

fn run_grid(cfg: &ExperimentConfig, data: &Data, cells: &[(u64, usize)], baselines: bool) -> RunOutput {
    let contexts: Vec<(u64, usize, Result<SeedContext>)> = cells
        .par_iter()
        .map(|&(seed, delta)| (seed, delta, prepare_seed(cfg, data, seed, delta)))
        .collect();
    let mut jobs: Vec<(&SeedContext, Option<Algorithm>)> = Vec::new();
    let mut out = RunOutput::default();
    for (seed, delta, ctx) in &contexts {
        match ctx {
            Ok(ctx) => {
                if baselines {
                    jobs.push((ctx, None));
                }
                jobs.extend(cfg.algorithms.iter().map(|&a| (ctx, Some(a))));
            }
            Err(e) => {
                let labels = baselines
                    .then_some([LOGGER_ROW, SKYLINE_ROW])
                    .into_iter()
                    .flatten()
                    .chain(cfg.algorithms.iter().map(|a| a.name()));
                for label in labels {
                    out.rows.push(ResultRow::failed(cfg, label, *seed, *delta, e));
                }
            }
        }
    }
    let results: Vec<RunOutput> = jobs
        .par_iter()
        .map(|&(ctx, algorithm)| match algorithm {
            Some(a) => run_cell(cfg, data, ctx, a),
            None => baseline_rows(cfg, data, ctx),
        })
        .collect();
    for r in results {
        out.extend(r);
    }
    out.sort();
    out
}

/// All configured algorithms and baselines over all configured seeds.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Data) -> Result<RunOutput> {
    cfg.validate()?;
    let cells: Vec<(u64, usize)> = cfg.seeds.iter().map(|&s| (s, cfg.delta)).collect();
    Ok(worker_pool()?.install(|| run_grid(cfg, data, &cells, true)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dataset: String,
    pub algorithm: String,
    pub delta: usize,
    pub seed: u64,
    pub expected_loss: f64,
    pub greedy_loss: f64,
}

/// Every algorithm at every replay count over the sweep seeds.
pub fn replay_sweep(cfg: &ExperimentConfig, data: &Data, deltas: &[usize]) -> Result<(Vec<SweepRow>, RunOutput)> {
    cfg.validate()?;
    if deltas.is_empty() || deltas.contains(&0) {
        return Err(ConfigError::Invalid("replay counts must be >= 1".into()).into());
    }
    let cells: Vec<(u64, usize)> = deltas
        .iter()
        .flat_map(|&d| cfg.sweep_seeds.iter().map(move |&s| (s, d)))
        .collect();
    let out = worker_pool()?.install(|| run_grid(cfg, data, &cells, false));
    let mut rows: Vec<SweepRow> = out
        .rows
        .iter()
        .map(|r| SweepRow {
            dataset: r.dataset.clone(),
            algorithm: r.algorithm.clone(),
            delta: r.delta,
            seed: r.seed,
            expected_loss: r.expected_loss,
            greedy_loss: r.greedy_loss,
        })
        .collect();
    rows.sort_by_key(|r| (row_order(&r.algorithm), r.delta, r.seed));
    Ok((rows, out))
}

/// Convenience for callers holding a config file on disk.
pub fn load_config_and_data(path: &Path, overrides: &[String]) -> Result<(ExperimentConfig, Data)> {
    let mut cfg = ExperimentConfig::load(path)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    let data = load_data(&cfg)?;
    Ok((cfg, data))
}
