//! Text format for fitted policy weights.
//!
//! ```text
//! labels = 3
//! features = 5
//! bias = true
//! weights
//! 0.1 -0.2 0 0 1.5
//! ...one row per label...
//! ```
//!
//! `bias = true` means the last feature is a constant 1 appended to the
//! inputs, so raw test files carry `features − 1` columns.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dro_crm::policy::PolicyParams;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Core(#[from] dro_crm::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedPolicy {
    pub params: PolicyParams,
    pub bias: bool,
}

impl SavedPolicy {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "labels = {}\nfeatures = {}\nbias = {}\nweights\n",
            self.params.labels(),
            self.params.features(),
            self.bias
        );
        for l in 0..self.params.labels() {
            let row: Vec<String> = self.params.row(l).iter().map(|w| format!("{w:?}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, ParamsError> {
        let err = |line: usize, message: String| ParamsError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (mut labels, mut features, mut bias) = (None, None, None);
        for (i, line) in lines.by_ref() {
            let line = line.trim();
            if line == "weights" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, "expected key = value".into()))?;
            let v = v.trim();
            match k.trim() {
                "labels" => labels = Some(v.parse().map_err(|_| err(i + 1, format!("bad label count {v:?}")))?),
                "features" => features = Some(v.parse().map_err(|_| err(i + 1, format!("bad feature count {v:?}")))?),
                "bias" => bias = Some(v.parse().map_err(|_| err(i + 1, format!("bad bias flag {v:?}")))?),
                other => return Err(err(i + 1, format!("unknown key {other:?}"))),
            }
        }
        let (Some(labels), Some(features), Some(bias)) = (labels, features, bias) else {
            return Err(err(0, "header needs labels, features and bias before `weights`".into()));
        };
        let mut weights = Vec::with_capacity(labels * features);
        let mut rows = 0;
        for (i, line) in lines {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| err(i + 1, format!("bad weight {t:?}"))))
                .collect::<Result<_, _>>()?;
            if row.len() != features {
                return Err(err(i + 1, format!("expected {features} weights, got {}", row.len())));
            }
            weights.extend(row);
            rows += 1;
        }
        if rows != labels {
            return Err(err(0, format!("expected {labels} weight rows, got {rows}")));
        }
        Ok(Self {
            params: PolicyParams::from_weights(labels, features, weights)?,
            bias,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamsError> {
        fs::write(path, self.to_text()).map_err(|source| ParamsError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ParamsError> {
        let text = fs::read_to_string(path).map_err(|source| ParamsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(path, &text)
    }

    /// Feature count of the raw inputs the policy expects.
    pub fn input_features(&self) -> usize {
        self.params.features() - usize::from(self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let params = PolicyParams::from_weights(2, 3, vec![0.1, -2.5e-17, 3.0, 1.0 / 3.0, 0.0, -7.25]).unwrap();
        let saved = SavedPolicy { params, bias: true };
        let back = SavedPolicy::parse(Path::new("p"), &saved.to_text()).unwrap();
        assert_eq!(back, saved);
        assert_eq!(back.input_features(), 2);
    }

    #[test]
    fn shape_errors_are_reported() {
        let text = "labels = 2\nfeatures = 2\nbias = false\nweights\n1 2\n3\n";
        match SavedPolicy::parse(Path::new("p"), text) {
            Err(ParamsError::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        assert!(SavedPolicy::parse(Path::new("p"), "labels = 1\nweights\n").is_err());
    }
}
