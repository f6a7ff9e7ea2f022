//! Result files.
//!
//! `results.csv` holds one row per (algorithm, seed) and is byte-identical
//! across runs of the same configuration: rows are sorted and wall times go
//! to `timings.csv` instead. Numbers are written with 6 significant digits,
//! and aggregates are computed from those written values so that re-reading
//! the file reproduces them exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::experiment::{row_order, GridScore, ResultRow, RunOutput, SweepRow, Timing, LOGGER_ROW, SKYLINE_ROW};
use crate::stats::{mean_se, paired_t_test_one_tailed};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

// ── Number formatting ───────────────────────────────────────────────────

/// Six significant digits in the style of C's `%g`.
pub fn fmt6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..6).contains(&exp) {
        trim(format!("{x:.*}", (5 - exp) as usize))
    } else {
        format!("{}e{exp}", trim(mantissa.to_string()))
    }
}

/// The value as it reads back from a file written with [`fmt6`].
pub fn quantize(x: f64) -> f64 {
    fmt6(x).parse().unwrap_or(f64::NAN)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt6).unwrap_or_default()
}

// ── Writers ─────────────────────────────────────────────────────────────

pub const RESULTS_HEADER: [&str; 9] = [
    "dataset",
    "algorithm",
    "seed",
    "delta",
    "hyper_name",
    "hyper_value",
    "expected_loss",
    "greedy_loss",
    "status",
];

pub const SUMMARY_HEADER: [&str; 11] = [
    "dataset",
    "algorithm",
    "runs",
    "failed",
    "expected_mean",
    "expected_se",
    "greedy_mean",
    "greedy_se",
    "t_vs_best",
    "p_vs_best",
    "note",
];

pub const SWEEP_HEADER: [&str; 6] = ["dataset", "algorithm", "delta", "seed", "expected_loss", "greedy_loss"];

fn write_csv<const N: usize>(
    path: &Path,
    header: [&str; N],
    rows: impl IntoIterator<Item = [String; N]>,
) -> Result<()> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_csv(
        path,
        RESULTS_HEADER,
        rows.iter().map(|r| {
            [
                r.dataset.clone(),
                r.algorithm.clone(),
                r.seed.to_string(),
                r.delta.to_string(),
                r.hyper_name.clone(),
                fmt_opt(r.hyper),
                fmt6(r.expected_loss),
                fmt6(r.greedy_loss),
                r.status.clone(),
            ]
        }),
    )
}

pub fn write_grid_scores(path: &Path, scores: &[GridScore]) -> Result<()> {
    write_csv(
        path,
        [
            "dataset",
            "algorithm",
            "seed",
            "delta",
            "hyper_value",
            "ips_score",
            "iterations",
            "termination",
            "selected",
        ],
        scores.iter().map(|s| {
            [
                s.dataset.clone(),
                s.algorithm.clone(),
                s.seed.to_string(),
                s.delta.to_string(),
                fmt_opt(s.hyper),
                fmt6(s.ips_score),
                s.iterations.to_string(),
                s.termination.clone(),
                s.selected.to_string(),
            ]
        }),
    )
}

pub fn write_timings(path: &Path, timings: &[Timing]) -> Result<()> {
    write_csv(
        path,
        ["algorithm", "seed", "delta", "seconds"],
        timings.iter().map(|t| {
            [
                t.algorithm.clone(),
                t.seed.to_string(),
                t.delta.to_string(),
                fmt6(t.seconds),
            ]
        }),
    )
}

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    write_csv(
        path,
        SUMMARY_HEADER,
        summary.iter().map(|s| {
            [
                s.dataset.clone(),
                s.algorithm.clone(),
                s.runs.to_string(),
                s.failed.to_string(),
                fmt6(s.expected_mean),
                fmt6(s.expected_se),
                fmt6(s.greedy_mean),
                fmt6(s.greedy_se),
                fmt_opt(s.t_vs_best),
                fmt_opt(s.p_vs_best),
                s.note.clone(),
            ]
        }),
    )
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(
        path,
        SWEEP_HEADER,
        rows.iter().map(|r| {
            [
                r.dataset.clone(),
                r.algorithm.clone(),
                r.delta.to_string(),
                r.seed.to_string(),
                fmt6(r.expected_loss),
                fmt6(r.greedy_loss),
            ]
        }),
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes `results.csv`, `summary.csv`, `grid_scores.csv`, `timings.csv`
/// and `run_meta` into `dir`.
pub fn emit_results(dir: &Path, output: &RunOutput, meta: &str) -> Result<Vec<SummaryRow>> {
    ensure_dir(dir)?;
    let rows: Vec<ResultRow> = output.rows.iter().map(quantize_row).collect();
    let summary = summarize(&rows);
    write_results(&dir.join("results.csv"), &rows)?;
    write_summary(&dir.join("summary.csv"), &summary)?;
    write_grid_scores(&dir.join("grid_scores.csv"), &output.grid_scores)?;
    write_timings(&dir.join("timings.csv"), &output.timings)?;
    write_text(&dir.join("run_meta"), meta)?;
    Ok(summary)
}

/// Writes `sweep.csv`, `sweep_summary.csv` and `run_meta` into `dir`.
pub fn emit_sweep(dir: &Path, rows: &[SweepRow], timings: &[Timing], meta: &str) -> Result<()> {
    ensure_dir(dir)?;
    let rows: Vec<SweepRow> = rows
        .iter()
        .map(|r| SweepRow {
            expected_loss: quantize(r.expected_loss),
            greedy_loss: quantize(r.greedy_loss),
            ..r.clone()
        })
        .collect();
    write_sweep(&dir.join("sweep.csv"), &rows)?;
    write_csv(
        &dir.join("sweep_summary.csv"),
        [
            "algorithm",
            "delta",
            "runs",
            "expected_mean",
            "expected_se",
            "greedy_mean",
            "greedy_se",
        ],
        sweep_aggregates(&rows).into_iter().map(|((alg, delta), a)| {
            [
                alg,
                delta.to_string(),
                a.runs.to_string(),
                fmt6(a.expected_mean),
                fmt6(a.expected_se),
                fmt6(a.greedy_mean),
                fmt6(a.greedy_se),
            ]
        }),
    )?;
    write_timings(&dir.join("timings.csv"), timings)?;
    write_text(&dir.join("run_meta"), meta)
}

fn quantize_row(r: &ResultRow) -> ResultRow {
    ResultRow {
        hyper: r.hyper.map(quantize),
        expected_loss: quantize(r.expected_loss),
        greedy_loss: quantize(r.greedy_loss),
        ..r.clone()
    }
}

// ── Aggregates ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub dataset: String,
    pub algorithm: String,
    /// Successful runs.
    pub runs: usize,
    pub failed: usize,
    pub expected_mean: f64,
    pub expected_se: f64,
    pub greedy_mean: f64,
    pub greedy_se: f64,
    pub t_vs_best: Option<f64>,
    /// One-tailed paired p-value for "worse than the best learned algorithm",
    /// paired by seed on expected loss.
    pub p_vs_best: Option<f64>,
    pub note: String,
}

fn is_baseline(label: &str) -> bool {
    label == LOGGER_ROW || label == SKYLINE_ROW
}

/// Per-label means and standard errors, plus paired tests against the
/// learned algorithm with the lowest mean expected loss.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut by_label: BTreeMap<(usize, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        by_label
            .entry((row_order(&r.algorithm), r.algorithm.clone()))
            .or_default()
            .push(r);
    }
    let mut summary: Vec<SummaryRow> = by_label
        .values()
        .map(|group| {
            let ok: Vec<&&ResultRow> = group.iter().filter(|r| r.is_ok()).collect();
            let exp: Vec<f64> = ok.iter().map(|r| r.expected_loss).collect();
            let greedy: Vec<f64> = ok.iter().map(|r| r.greedy_loss).collect();
            let (expected_mean, expected_se) = if exp.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_se(&exp)
            };
            let (greedy_mean, greedy_se) = if greedy.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_se(&greedy)
            };
            SummaryRow {
                dataset: group[0].dataset.clone(),
                algorithm: group[0].algorithm.clone(),
                runs: ok.len(),
                failed: group.len() - ok.len(),
                expected_mean,
                expected_se,
                greedy_mean,
                greedy_se,
                t_vs_best: None,
                p_vs_best: None,
                note: String::new(),
            }
        })
        .collect();

    let best = summary
        .iter()
        .filter(|s| !is_baseline(&s.algorithm) && s.runs > 0)
        .min_by(|a, b| a.expected_mean.total_cmp(&b.expected_mean))
        .map(|s| s.algorithm.clone());
    let Some(best) = best else {
        return summary;
    };
    let losses_by_seed = |label: &str| -> BTreeMap<u64, f64> {
        rows.iter()
            .filter(|r| r.algorithm == label && r.is_ok())
            .map(|r| (r.seed, r.expected_loss))
            .collect()
    };
    let best_losses = losses_by_seed(&best);
    for s in &mut summary {
        if s.algorithm == best {
            s.note = "best".into();
            continue;
        }
        let mine = losses_by_seed(&s.algorithm);
        let (a, b): (Vec<f64>, Vec<f64>) = mine
            .iter()
            .filter_map(|(seed, &v)| best_losses.get(seed).map(|&w| (v, w)))
            .unzip();
        match paired_t_test_one_tailed(&a, &b) {
            Ok(t) => {
                s.t_vs_best = Some(t.t);
                s.p_vs_best = Some(t.p_value);
                if t.degenerate {
                    s.note = "degenerate".into();
                }
            }
            Err(_) => s.note = "too few pairs".into(),
        }
    }
    summary
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepAggregate {
    pub runs: usize,
    pub expected_mean: f64,
    pub expected_se: f64,
    pub greedy_mean: f64,
    pub greedy_se: f64,
}

/// Means over seeds per (algorithm, replay count), skipping failed rows.
pub fn sweep_aggregates(rows: &[SweepRow]) -> BTreeMap<(String, usize), SweepAggregate> {
    let mut groups: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.expected_loss.is_finite()) {
        let g = groups.entry((r.algorithm.clone(), r.delta)).or_default();
        g.0.push(r.expected_loss);
        g.1.push(r.greedy_loss);
    }
    groups
        .into_iter()
        .map(|(k, (e, g))| {
            let (expected_mean, expected_se) = mean_se(&e);
            let (greedy_mean, greedy_se) = mean_se(&g);
            (
                k,
                SweepAggregate {
                    runs: e.len(),
                    expected_mean,
                    expected_se,
                    greedy_mean,
                    greedy_se,
                },
            )
        })
        .collect()
}

// ── Readers ─────────────────────────────────────────────────────────────

fn read_csv<const N: usize, T>(
    path: &Path,
    header: [&str; N],
    mut parse: impl FnMut(&csv::StringRecord) -> Option<T>,
) -> Result<Vec<T>> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let found = rd.headers().map_err(csv_err)?.clone();
    if found.iter().ne(header) {
        return Err(ReportError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unexpected header {found:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        out.push(parse(&rec).ok_or_else(|| ReportError::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: "malformed row".into(),
        })?);
    }
    Ok(out)
}

fn num(s: &str) -> Option<f64> {
    s.parse().ok()
}

fn opt_num(s: &str) -> Option<Option<f64>> {
    if s.is_empty() {
        Some(None)
    } else {
        num(s).map(Some)
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    read_csv(path, RESULTS_HEADER, |r| {
        Some(ResultRow {
            dataset: r.get(0)?.to_string(),
            algorithm: r.get(1)?.to_string(),
            seed: r.get(2)?.parse().ok()?,
            delta: r.get(3)?.parse().ok()?,
            hyper_name: r.get(4)?.to_string(),
            hyper: opt_num(r.get(5)?)?,
            expected_loss: num(r.get(6)?)?,
            greedy_loss: num(r.get(7)?)?,
            status: r.get(8)?.to_string(),
        })
    })
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    read_csv(path, SUMMARY_HEADER, |r| {
        Some(SummaryRow {
            dataset: r.get(0)?.to_string(),
            algorithm: r.get(1)?.to_string(),
            runs: r.get(2)?.parse().ok()?,
            failed: r.get(3)?.parse().ok()?,
            expected_mean: num(r.get(4)?)?,
            expected_se: num(r.get(5)?)?,
            greedy_mean: num(r.get(6)?)?,
            greedy_se: num(r.get(7)?)?,
            t_vs_best: opt_num(r.get(8)?)?,
            p_vs_best: opt_num(r.get(9)?)?,
            note: r.get(10)?.to_string(),
        })
    })
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    read_csv(path, SWEEP_HEADER, |r| {
        Some(SweepRow {
            dataset: r.get(0)?.to_string(),
            algorithm: r.get(1)?.to_string(),
            delta: r.get(2)?.parse().ok()?,
            seed: r.get(3)?.parse().ok()?,
            expected_loss: num(r.get(4)?)?,
            greedy_loss: num(r.get(5)?)?,
        })
    })
}
