//! Multilabel svmlight text format.
//!
//! One example per line: a comma-separated label list, then `index:value`
//! pairs with 1-based feature indices. The label list may be empty. Text
//! after `#` is ignored.
//!
//! ```text
//! 0,2 1:0.5 4:1.0
//! 3:0.25
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::policy::{ActionVector, FeatureVector};
use crate::sim::{Example, SupervisedDataset};

/// How label ids in the file map to label slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelBase {
    /// 0-based if any label id 0 appears, 1-based otherwise.
    #[default]
    Auto,
    Zero,
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadOptions {
    pub label_base: LabelBase,
    /// Label count; defaults to the largest label id seen plus one.
    pub num_labels: Option<usize>,
    /// Feature dimension; defaults to the largest feature index seen.
    pub num_features: Option<usize>,
}

struct RawExample {
    labels: Vec<usize>,
    features: Vec<(usize, f64)>,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_line(path: &Path, lineno: usize, line: &str) -> Result<Option<RawExample>> {
    let content = line.split('#').next().unwrap_or("").trim();
    if content.is_empty() {
        return Ok(None);
    }
    let mut tokens = content.split_whitespace().peekable();
    let mut labels = Vec::new();
    if let Some(first) = tokens.peek() {
        if !first.contains(':') {
            for id in first.split(',').filter(|s| !s.is_empty()) {
                let id = id
                    .parse::<usize>()
                    .map_err(|_| parse_error(path, lineno, format!("bad label id {id:?}")))?;
                labels.push(id);
            }
            tokens.next();
        }
    }
    let mut features = Vec::new();
    for tok in tokens {
        let (idx, val) = tok
            .split_once(':')
            .ok_or_else(|| parse_error(path, lineno, format!("expected index:value, got {tok:?}")))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| parse_error(path, lineno, format!("bad feature index {idx:?}")))?;
        if idx == 0 {
            return Err(parse_error(path, lineno, "feature indices are 1-based"));
        }
        let val: f64 = val
            .parse()
            .map_err(|_| parse_error(path, lineno, format!("bad feature value {val:?}")))?;
        if !val.is_finite() {
            return Err(parse_error(path, lineno, format!("non-finite feature value {val}")));
        }
        features.push((idx - 1, val));
    }
    Ok(Some(RawExample { labels, features }))
}

fn parse_file(path: &Path, text: &str) -> Result<Vec<(usize, RawExample)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(raw) = parse_line(path, i + 1, line)? {
            out.push((i + 1, raw));
        }
    }
    if out.is_empty() {
        return Err(Error::NoExamples(path.to_path_buf()));
    }
    Ok(out)
}

/// Builds datasets from already-read sources so that all of them share the
/// label base, label count and feature dimension.
pub fn parse_joint(sources: &[(PathBuf, String)], options: &LoadOptions) -> Result<Vec<SupervisedDataset>> {
    let parsed = sources
        .iter()
        .map(|(path, text)| parse_file(path, text))
        .collect::<Result<Vec<_>>>()?;
    let all = || parsed.iter().flatten().map(|(_, r)| r);
    let one_based = match options.label_base {
        LabelBase::Zero => false,
        LabelBase::One => true,
        LabelBase::Auto => !all().any(|r| r.labels.contains(&0)),
    };
    let max_label = all().flat_map(|r| r.labels.iter().copied()).max();
    let labels = match options.num_labels {
        Some(q) => q,
        None => match max_label {
            Some(m) => m + usize::from(!one_based),
            None => return Err(Error::contract("no label ids found; set the label count explicitly")),
        },
    };
    let features = options.num_features.unwrap_or_else(|| {
        all()
            .flat_map(|r| r.features.iter().map(|(j, _)| j + 1))
            .max()
            .unwrap_or(0)
    });
    if labels == 0 || features == 0 {
        return Err(Error::contract("datasets need at least one label and one feature"));
    }

    let mut datasets = Vec::with_capacity(parsed.len());
    for ((path, _), rows) in sources.iter().zip(parsed) {
        let mut examples = Vec::with_capacity(rows.len());
        for (lineno, raw) in rows {
            let mut ids = Vec::with_capacity(raw.labels.len());
            for id in raw.labels {
                let slot = if one_based {
                    id.checked_sub(1)
                        .ok_or_else(|| parse_error(path, lineno, "label id 0 in a 1-based file"))?
                } else {
                    id
                };
                if slot >= labels {
                    return Err(parse_error(
                        path,
                        lineno,
                        format!("label id {id} out of range for {labels} labels"),
                    ));
                }
                ids.push(slot);
            }
            let y = ActionVector::from_labels(labels, &ids).map_err(|e| parse_error(path, lineno, e.to_string()))?;
            let x = FeatureVector::new(features, raw.features).map_err(|e| parse_error(path, lineno, e.to_string()))?;
            examples.push(Example { x: Arc::new(x), y });
        }
        datasets.push(SupervisedDataset::new(examples, labels, features)?);
    }
    Ok(datasets)
}

/// Loads several files with shared dimensions (e.g. a train and a test split).
pub fn load_joint(paths: &[&Path], options: &LoadOptions) -> Result<Vec<SupervisedDataset>> {
    let sources = paths
        .iter()
        .map(|p| {
            fs::read_to_string(p)
                .map(|text| (p.to_path_buf(), text))
                .map_err(|e| Error::io(*p, e))
        })
        .collect::<Result<Vec<_>>>()?;
    parse_joint(&sources, options)
}

pub fn load_multilabel_svmlight(path: &Path, options: &LoadOptions) -> Result<SupervisedDataset> {
    Ok(load_joint(&[path], options)?.remove(0))
}

/// Writes with 0-based label ids and 1-based feature indices. Floats use the
/// shortest representation that reads back exactly.
pub fn write_multilabel<W: Write>(dataset: &SupervisedDataset, out: &mut W) -> std::io::Result<()> {
    for ex in dataset.examples() {
        let labels: Vec<String> = ex.y.labels().iter().map(|l| l.to_string()).collect();
        write!(out, "{}", labels.join(","))?;
        for (j, v) in ex.x.iter() {
            write!(out, " {}:{v:?}", j + 1)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_multilabel_svmlight(dataset: &SupervisedDataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_multilabel(dataset, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
