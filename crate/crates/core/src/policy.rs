//! Exponential policies over multilabel actions.
//!
//! With the joint feature map `φ(x, y) = x ⊗ y` the score `θᵀφ(x, y)` is
//! `Σₗ yₗ·uₗ` where `uₗ = θₗ·x` is the per-label logit, so the partition
//! function factorises and each label is an independent Bernoulli with
//! probability `σ(uₗ)`. Everything here (probabilities, sampling, gradients,
//! expected Hamming loss) is exact under that factorisation.

use rand::Rng;

use crate::error::{check_dim, Error, Result};

/// Logits are clamped to this magnitude before exponentiation.
pub const LOGIT_CLAMP: f64 = 500.0;

/// Sparse context features with a fixed total dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl FeatureVector {
    /// Builds a sparse vector from `(index, value)` pairs; indices must be
    /// distinct and below `dim`, values finite.
    pub fn new(dim: usize, mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|&(i, _)| i);
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::contract(format!("duplicate feature index {}", pair[0].0)));
            }
        }
        if let Some(&(i, _)) = entries.iter().find(|&&(i, _)| i >= dim) {
            return Err(Error::contract(format!("feature index {i} out of range for dim {dim}")));
        }
        if let Some(&(_, v)) = entries.iter().find(|&&(_, v)| !v.is_finite()) {
            return Err(Error::contract(format!("feature value must be finite, got {v}")));
        }
        let (indices, values) = entries.into_iter().unzip();
        Ok(Self { dim, indices, values })
    }

    pub fn from_dense(values: &[f64]) -> Result<Self> {
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i, v))
            .collect();
        Self::new(values.len(), entries)
    }

    /// Unit vector `e_index`.
    pub fn unit(dim: usize, index: usize) -> Result<Self> {
        Self::new(dim, vec![(index, 1.0)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.iter().map(|(i, v)| v * dense[i]).sum()
    }

    /// Appends a constant `1.0` coordinate at index `dim`.
    pub fn with_bias(&self) -> Self {
        let mut out = self.clone();
        out.indices.push(self.dim);
        out.values.push(1.0);
        out.dim += 1;
        out
    }

    /// Same entries in a space of larger dimension.
    pub fn widened(&self, dim: usize) -> Result<Self> {
        if dim < self.dim {
            return Err(Error::contract(format!(
                "cannot shrink feature vector from {} to {dim}",
                self.dim
            )));
        }
        let mut out = self.clone();
        out.dim = dim;
        Ok(out)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= factor;
        }
        out
    }
}

/// A multilabel action `y ∈ {0,1}^q`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionVector {
    bits: Vec<bool>,
}

impl ActionVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    /// Action with the given labels switched on.
    pub fn from_labels(len: usize, labels: &[usize]) -> Result<Self> {
        let mut bits = vec![false; len];
        for &l in labels {
            if l >= len {
                return Err(Error::contract(format!("label {l} out of range for {len} labels")));
            }
            bits[l] = true;
        }
        Ok(Self { bits })
    }

    /// Parses a string of `0`/`1` characters.
    pub fn from_bit_string(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::contract(format!("invalid action bit {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, label: usize) -> bool {
        self.bits[label]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Indices of the labels that are switched on.
    pub fn labels(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect()
    }

    /// All `2^len` actions in binary counting order. Only for small `len`.
    pub fn enumerate(len: usize) -> impl Iterator<Item = ActionVector> {
        assert!(len < 32, "cannot enumerate 2^{len} actions");
        (0u32..(1u32 << len)).map(move |code| ActionVector::new((0..len).map(|l| code >> l & 1 == 1).collect()))
    }
}

/// Per-label weight rows `θ` of shape `labels × features`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    labels: usize,
    features: usize,
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(labels: usize, features: usize) -> Self {
        Self {
            labels,
            features,
            weights: vec![0.0; labels * features],
        }
    }

    pub fn from_weights(labels: usize, features: usize, weights: Vec<f64>) -> Result<Self> {
        check_dim("policy weights", labels * features, weights.len())?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::contract("policy weights must be finite"));
        }
        Ok(Self {
            labels,
            features,
            weights,
        })
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn row(&self, label: usize) -> &[f64] {
        &self.weights[label * self.features..(label + 1) * self.features]
    }

    pub fn row_mut(&mut self, label: usize) -> &mut [f64] {
        &mut self.weights[label * self.features..(label + 1) * self.features]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.weights
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            labels: self.labels,
            features: self.features,
            weights: self.weights.iter().map(|w| w * factor).collect(),
        }
    }

    fn check_features(&self, x: &FeatureVector) -> Result<()> {
        check_dim("feature dimension", self.features, x.dim())
    }

    fn check_action(&self, y: &ActionVector) -> Result<()> {
        check_dim("action length", self.labels, y.len())
    }
}

// ── Scalar helpers ──────────────────────────────────────────────────────

pub(crate) fn clamp_logit(u: f64) -> f64 {
    u.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// `ln(1 + e^u)`.
pub(crate) fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `ln π(y|x)` from (clamped) logits.
pub(crate) fn log_prob_from_logits(logits: &[f64], y: &ActionVector) -> f64 {
    logits
        .iter()
        .zip(y.bits())
        .map(|(&u, &bit)| if bit { u - softplus(u) } else { -softplus(u) })
        .sum()
}

pub(crate) fn logits_unchecked(params: &PolicyParams, x: &FeatureVector, out: &mut [f64]) {
    for (l, slot) in out.iter_mut().enumerate() {
        *slot = clamp_logit(x.dot(params.row(l)));
    }
}

/// Adds `scale · ∇θ ln π(y|x)` into a dense gradient buffer, given the label
/// probabilities `σ(uₗ)`.
pub(crate) fn add_scaled_score(
    grad: &mut [f64],
    features: usize,
    x: &FeatureVector,
    y: &ActionVector,
    probs: &[f64],
    scale: f64,
) {
    for (l, (&prob, &bit)) in probs.iter().zip(y.bits()).enumerate() {
        let coef = scale * (f64::from(u8::from(bit)) - prob);
        if coef == 0.0 {
            continue;
        }
        let row = &mut grad[l * features..(l + 1) * features];
        for (j, v) in x.iter() {
            row[j] += coef * v;
        }
    }
}

// ── Operations ──────────────────────────────────────────────────────────

/// Per-label scores `uₗ = θₗ·x` (unclamped).
pub fn label_logits(params: &PolicyParams, x: &FeatureVector) -> Result<Vec<f64>> {
    params.check_features(x)?;
    Ok((0..params.labels()).map(|l| x.dot(params.row(l))).collect())
}

/// `ln π_θ(y|x) = Σₗ [yₗuₗ − ln(1 + e^{uₗ})]`; always `≤ 0`.
pub fn log_prob(params: &PolicyParams, x: &FeatureVector, y: &ActionVector) -> Result<f64> {
    params.check_features(x)?;
    params.check_action(y)?;
    let mut logits = vec![0.0; params.labels()];
    logits_unchecked(params, x, &mut logits);
    Ok(log_prob_from_logits(&logits, y).min(0.0))
}

/// Draws `y ~ π_θ(·|x)` label by label; returns the action and its probability.
pub fn sample_action<R: Rng + ?Sized>(
    params: &PolicyParams,
    x: &FeatureVector,
    rng: &mut R,
) -> Result<(ActionVector, f64)> {
    params.check_features(x)?;
    let mut logits = vec![0.0; params.labels()];
    logits_unchecked(params, x, &mut logits);
    let bits = logits.iter().map(|&u| rng.random::<f64>() < sigmoid(u)).collect();
    let y = ActionVector::new(bits);
    let propensity = log_prob_from_logits(&logits, &y).min(0.0).exp();
    Ok((y, propensity))
}

/// Most probable action: `yₗ = 1` iff `uₗ > 0` (ties go to 0).
pub fn greedy_action(params: &PolicyParams, x: &FeatureVector) -> Result<ActionVector> {
    let logits = label_logits(params, x)?;
    Ok(ActionVector::new(logits.iter().map(|&u| u > 0.0).collect()))
}

/// Dense gradient of `ln π_θ(y|x)`; row `l` is `(yₗ − σ(uₗ))·x`.
pub fn grad_log_prob(params: &PolicyParams, x: &FeatureVector, y: &ActionVector) -> Result<Vec<f64>> {
    params.check_features(x)?;
    params.check_action(y)?;
    let mut logits = vec![0.0; params.labels()];
    logits_unchecked(params, x, &mut logits);
    let probs: Vec<f64> = logits.iter().map(|&u| sigmoid(u)).collect();
    let mut grad = vec![0.0; params.as_slice().len()];
    add_scaled_score(&mut grad, params.features(), x, y, &probs, 1.0);
    Ok(grad)
}

/// Exact `E_{y~π_θ(·|x)} Hamming(y, y*)`.
pub fn expected_hamming(params: &PolicyParams, x: &FeatureVector, y_star: &ActionVector) -> Result<f64> {
    params.check_action(y_star)?;
    let logits = label_logits(params, x)?;
    Ok(logits
        .iter()
        .zip(y_star.bits())
        .map(|(&u, &truth)| {
            // P(yₗ ≠ y*ₗ)
            if truth {
                sigmoid(-u)
            } else {
                sigmoid(u)
            }
        })
        .sum())
}
