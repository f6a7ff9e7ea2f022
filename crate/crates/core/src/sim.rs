//! Supervised-to-bandit conversion.
//!
//! A multilabel dataset is split into train and validation parts, a logging
//! policy is fitted on a small slice of the train part, and the logger then
//! replays the train examples to produce propensity-logged Hamming feedback.
//! Policies are scored on held-out data with the exact expected Hamming loss.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::objectives::{ips_risk, BanditLog, BanditRecord, CostScale};
use crate::optim::{minimize_params, OptimConfig};
use crate::policy::{
    add_scaled_score, expected_hamming, greedy_action, logits_unchecked, sample_action, sigmoid, softplus,
    ActionVector, FeatureVector, PolicyParams,
};

// ── Seeds ───────────────────────────────────────────────────────────────

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a tuple of integers.
pub fn stream_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5851_f42d_4c95_7f2d, |h, &p| splitmix64(h ^ splitmix64(p)))
}

const SPLIT_STREAM: u64 = 1;
const LOG_STREAM: u64 = 2;

// ── Datasets ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Arc<FeatureVector>,
    /// Ground-truth label vector `y*`.
    pub y: ActionVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedDataset {
    examples: Vec<Example>,
    labels: usize,
    features: usize,
}

impl SupervisedDataset {
    pub fn new(examples: Vec<Example>, labels: usize, features: usize) -> Result<Self> {
        for ex in &examples {
            check_dim("example label count", labels, ex.y.len())?;
            check_dim("example feature dimension", features, ex.x.dim())?;
        }
        Ok(Self {
            examples,
            labels,
            features,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Appends a constant-1 feature to every example.
    pub fn with_bias(&self) -> Self {
        let examples = self
            .examples
            .iter()
            .map(|ex| Example {
                x: Arc::new(ex.x.with_bias()),
                y: ex.y.clone(),
            })
            .collect();
        Self {
            examples,
            labels: self.labels,
            features: self.features + 1,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            labels: self.labels,
            features: self.features,
        }
    }
}

/// Random linear multilabel data: `y*ₗ = 1` iff `wₗ·x + noise·ξ > 0` with
/// standard normal `x`, `w` and `ξ`. `noise = 0` makes every label linearly
/// separable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub examples: usize,
    pub labels: usize,
    pub features: usize,
    pub noise: f64,
    pub seed: u64,
}

pub fn synthetic_multilabel(spec: &SyntheticSpec) -> Result<SupervisedDataset> {
    if spec.labels == 0 || spec.features == 0 || !(spec.noise >= 0.0) {
        return Err(Error::contract("synthetic data needs labels, features and noise >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let w: Vec<f64> = (0..spec.labels * spec.features).map(|_| normal()).collect();
    let mut examples = Vec::with_capacity(spec.examples);
    for _ in 0..spec.examples {
        let x: Vec<f64> = (0..spec.features).map(|_| normal()).collect();
        let bits = (0..spec.labels)
            .map(|l| {
                let u: f64 = w[l * spec.features..(l + 1) * spec.features]
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| a * b)
                    .sum();
                u + spec.noise * normal() > 0.0
            })
            .collect();
        examples.push(Example {
            x: Arc::new(FeatureVector::from_dense(&x)?),
            y: ActionVector::new(bits),
        });
    }
    SupervisedDataset::new(examples, spec.labels, spec.features)
}

// ── Splitting ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    /// Share of the pool going to train; the rest is validation.
    pub train_frac: f64,
    /// Share of train used to fit the logger.
    pub logger_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.75,
            logger_frac: 0.05,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train_frac", self.train_frac), ("logger_frac", self.logger_frac)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::contract(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: SupervisedDataset,
    pub valid: SupervisedDataset,
    /// Drawn from `train`.
    pub logger: SupervisedDataset,
    pub train_indices: Vec<usize>,
    pub valid_indices: Vec<usize>,
    pub logger_indices: Vec<usize>,
}

/// Seeded shuffle, then `round(train_frac·N)` train examples (at least one
/// on each side) and `ceil(logger_frac·|train|)` logger examples.
pub fn split_dataset(ds: &SupervisedDataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let n = ds.len();
    if n < 2 {
        return Err(Error::contract(format!("need at least 2 examples to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[spec.seed, SPLIT_STREAM]));
    order.shuffle(&mut rng);
    let n_train = ((spec.train_frac * n as f64).round() as usize).clamp(1, n - 1);
    let (train_idx, valid_idx) = order.split_at(n_train);
    let n_logger = ((spec.logger_frac * n_train as f64).ceil() as usize).clamp(1, n_train);
    let mut logger_order: Vec<usize> = (0..n_train).collect();
    logger_order.shuffle(&mut rng);
    let logger_idx: Vec<usize> = logger_order[..n_logger].iter().map(|&i| train_idx[i]).collect();
    Ok(Split {
        train: ds.subset(train_idx),
        valid: ds.subset(valid_idx),
        logger: ds.subset(&logger_idx),
        train_indices: train_idx.to_vec(),
        valid_indices: valid_idx.to_vec(),
        logger_indices: logger_idx,
    })
}

// ── Logging policy ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoggerSpec {
    /// L2 strength on the weights.
    pub l2: f64,
    /// Multiplier applied to the fitted weights; below 1 keeps the logger stochastic.
    pub alpha: f64,
    pub optim: OptimConfig,
}

impl Default for LoggerSpec {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            alpha: 0.5,
            optim: OptimConfig::default(),
        }
    }
}

/// Per-label L2-regularised logistic regression, by quasi-Newton descent on
/// the mean negative log-likelihood plus `l2/2·‖θ‖²`.
pub fn fit_supervised(ds: &SupervisedDataset, l2: f64, cfg: &OptimConfig) -> Result<PolicyParams> {
    if ds.is_empty() {
        return Err(Error::contract("cannot fit a policy on an empty dataset"));
    }
    if !(l2 >= 0.0) {
        return Err(Error::contract(format!("l2 must be >= 0, got {l2}")));
    }
    let (q, d) = (ds.labels(), ds.features());
    let m = ds.len() as f64;
    let mut nll = |theta: &[f64], grad: &mut [f64]| -> f64 {
        let params = PolicyParams::from_weights(q, d, theta.to_vec()).expect("shape fixed by the optimiser");
        let mut logits = vec![0.0; q];
        let mut probs = vec![0.0; q];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        for ex in ds.examples() {
            logits_unchecked(&params, &ex.x, &mut logits);
            for ((u, p), &bit) in logits.iter().zip(probs.iter_mut()).zip(ex.y.bits()) {
                *p = sigmoid(*u);
                value += softplus(*u) - if bit { *u } else { 0.0 };
            }
            add_scaled_score(grad, d, &ex.x, &ex.y, &probs, -1.0 / m);
        }
        value /= m;
        for (g, t) in grad.iter_mut().zip(theta) {
            *g += l2 * t;
            value += 0.5 * l2 * t * t;
        }
        value
    };
    let (params, _) = minimize_params(&mut nll, &PolicyParams::zeros(q, d), cfg)?;
    Ok(params)
}

pub fn train_logger(subset: &SupervisedDataset, spec: &LoggerSpec) -> Result<PolicyParams> {
    if !(spec.alpha > 0.0) {
        return Err(Error::contract(format!("logger alpha must be > 0, got {}", spec.alpha)));
    }
    Ok(fit_supervised(subset, spec.l2, &spec.optim)?.scaled(spec.alpha))
}

/// Mean log-likelihood of the ground-truth labels under `params`.
pub fn mean_log_likelihood(params: &PolicyParams, ds: &SupervisedDataset) -> Result<f64> {
    let mut total = 0.0;
    for ex in ds.examples() {
        total += crate::policy::log_prob(params, &ex.x, &ex.y)?;
    }
    Ok(total / ds.len() as f64)
}

// ── Bandit feedback ─────────────────────────────────────────────────────

pub fn hamming_cost(y: &ActionVector, y_star: &ActionVector) -> Result<usize> {
    check_dim("action length", y_star.len(), y.len())?;
    Ok(y.bits().iter().zip(y_star.bits()).filter(|(a, b)| a != b).count())
}

fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let rank = pct * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `M = P90/P10` of the propensities, floored at 1.
pub fn compute_clip_constant(propensities: &[f64]) -> Result<f64> {
    if propensities.is_empty() {
        return Err(Error::contract("clip constant needs at least one propensity"));
    }
    if let Some(p) = propensities.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::contract(format!("propensity {p} outside (0, 1]")));
    }
    let mut sorted = propensities.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((percentile(&sorted, 0.9) / percentile(&sorted, 0.1)).max(1.0))
}

/// Replays `train` through `logger` `replays` times. Records are ordered
/// replay-major and each one draws from its own seeded stream, so the log does
/// not depend on the worker count.
pub fn generate_bandit_log(
    logger: &PolicyParams,
    train: &SupervisedDataset,
    replays: usize,
    seed: u64,
) -> Result<BanditLog> {
    if replays == 0 {
        return Err(Error::contract("replay count must be >= 1"));
    }
    if train.is_empty() {
        return Err(Error::contract("cannot log feedback on an empty dataset"));
    }
    check_dim("logger labels", train.labels(), logger.labels())?;
    check_dim("logger features", train.features(), logger.features())?;
    let n = train.len();
    let scale = CostScale::hamming(train.labels());
    let records = (0..replays * n)
        .into_par_iter()
        .map(|k| {
            let (replay, i) = (k / n, k % n);
            let ex = &train.examples()[i];
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, LOG_STREAM, replay as u64, i as u64]));
            let (y, propensity) = sample_action(logger, &ex.x, &mut rng)?;
            let cost = scale.apply(hamming_cost(&y, &ex.y)? as f64);
            Ok(BanditRecord {
                example_id: i,
                replay,
                x: ex.x.clone(),
                y,
                propensity,
                cost,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let clip = compute_clip_constant(&records.iter().map(|r| r.propensity).collect::<Vec<_>>())?;
    BanditLog::new(records, clip, scale)
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Exact expected Hamming loss of the stochastic policy.
    Expected,
    /// Hamming loss of the most probable action.
    Greedy,
}

pub fn evaluate_policy(params: &PolicyParams, test: &SupervisedDataset, mode: EvalMode) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let mut total = 0.0;
    for ex in test.examples() {
        total += match mode {
            EvalMode::Expected => expected_hamming(params, &ex.x, &ex.y)?,
            EvalMode::Greedy => hamming_cost(&greedy_action(params, &ex.x)?, &ex.y)? as f64,
        };
    }
    Ok(total / test.len() as f64)
}

/// Unclipped IPS risk on a validation log; lower is better.
pub fn ips_validation_score(params: &PolicyParams, valid_log: &BanditLog) -> Result<f64> {
    ips_risk(params, valid_log)
}

// ── Log files ───────────────────────────────────────────────────────────

pub const LOG_HEADER: [&str; 7] = [
    "record_id",
    "replay",
    "example_id",
    "action_bits",
    "propensity",
    "cost_raw",
    "cost_scaled",
];

/// Contents of the key-value sidecar written next to a log CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMetadata {
    pub clip_m: f64,
    pub cost_scale: CostScale,
    pub seed: u64,
    pub replays: usize,
    pub labels: usize,
    pub features: usize,
    pub records: usize,
}

impl LogMetadata {
    pub fn describe(log: &BanditLog, seed: u64, replays: usize) -> Self {
        Self {
            clip_m: log.clip_m(),
            cost_scale: log.cost_scale(),
            seed,
            replays,
            labels: log.labels(),
            features: log.features(),
            records: log.len(),
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "clip_m={}\ncost_scale={}\ncost_offset={}\nseed={}\nreplays={}\nlabels={}\nfeatures={}\nrecords={}\n",
            self.clip_m,
            self.cost_scale.scale,
            self.cost_scale.offset,
            self.seed,
            self.replays,
            self.labels,
            self.features,
            self.records
        )
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected key=value".into(),
            })?;
            map.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        fn get<T: std::str::FromStr>(
            path: &Path,
            map: &std::collections::HashMap<String, (usize, String)>,
            key: &str,
        ) -> Result<T> {
            let (line, raw) = map.get(key).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("missing key {key}"),
            })?;
            raw.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("bad value for {key}: {raw:?}"),
            })
        }
        Ok(Self {
            clip_m: get(path, &map, "clip_m")?,
            cost_scale: CostScale {
                scale: get(path, &map, "cost_scale")?,
                offset: get(path, &map, "cost_offset")?,
            },
            seed: get(path, &map, "seed")?,
            replays: get(path, &map, "replays")?,
            labels: get(path, &map, "labels")?,
            features: get(path, &map, "features")?,
            records: get(path, &map, "records")?,
        })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

/// Writes the log CSV and its metadata sidecar.
pub fn write_bandit_log(log: &BanditLog, meta: &LogMetadata, csv_path: &Path, meta_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
    w.write_record(LOG_HEADER).map_err(|e| csv_error(csv_path, e))?;
    let scale = log.cost_scale();
    for (k, r) in log.records().iter().enumerate() {
        let raw = scale.invert(r.cost);
        let raw = if (raw - raw.round()).abs() < 1e-9 {
            raw.round()
        } else {
            raw
        };
        w.write_record([
            k.to_string(),
            r.replay.to_string(),
            r.example_id.to_string(),
            r.y.to_bit_string(),
            r.propensity.to_string(),
            raw.to_string(),
            r.cost.to_string(),
        ])
        .map_err(|e| csv_error(csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let mut f = fs::File::create(meta_path).map_err(|e| Error::io(meta_path, e))?;
    f.write_all(meta.to_text().as_bytes())
        .map_err(|e| Error::io(meta_path, e))
}

/// Reads a log written by [`write_bandit_log`]; contexts are taken from the
/// dataset the log was generated on, indexed by `example_id`.
pub fn read_bandit_log(
    csv_path: &Path,
    meta_path: &Path,
    dataset: &SupervisedDataset,
) -> Result<(BanditLog, LogMetadata)> {
    let text = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let meta = LogMetadata::parse(meta_path, &text)?;
    let mut rd = csv::Reader::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
    let header = rd.headers().map_err(|e| csv_error(csv_path, e))?.clone();
    if header.iter().ne(LOG_HEADER) {
        return Err(Error::Parse {
            path: csv_path.to_path_buf(),
            line: 1,
            message: format!("unexpected header {:?}", header),
        });
    }
    let mut records = Vec::new();
    for (k, row) in rd.records().enumerate() {
        let row = row.map_err(|e| csv_error(csv_path, e))?;
        let line = k + 2;
        let bad = |message: String| Error::Parse {
            path: csv_path.to_path_buf(),
            line,
            message,
        };
        let field = |i: usize| row.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| bad(format!("bad {}: {:?}", LOG_HEADER[i], field(i))))
        };
        let int = |i: usize| -> Result<usize> {
            field(i)
                .parse()
                .map_err(|_| bad(format!("bad {}: {:?}", LOG_HEADER[i], field(i))))
        };
        let example_id = int(2)?;
        let ex = dataset
            .examples()
            .get(example_id)
            .ok_or_else(|| bad(format!("example_id {example_id} outside the dataset")))?;
        records.push(BanditRecord {
            example_id,
            replay: int(1)?,
            x: ex.x.clone(),
            y: ActionVector::from_bit_string(field(3)).map_err(|e| bad(e.to_string()))?,
            propensity: num(4)?,
            cost: num(6)?,
        });
    }
    check_dim("log record count", meta.records, records.len())?;
    Ok((BanditLog::new(records, meta.clip_m, meta.cost_scale)?, meta))
}
