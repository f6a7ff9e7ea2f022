//! Counterfactual risk objectives over a bandit log.
//!
//! Every objective is a function of the per-record clipped losses
//! `zᵢ = cᵢ·min(M, π_θ(yᵢ|xᵢ)/pᵢ)`. Each one reports its value and the
//! sensitivities `∂R/∂zᵢ`; the θ-gradient is then `Σᵢ (∂R/∂zᵢ)·∇zᵢ` with
//! `∇zᵢ = cᵢ·(π_θ/pᵢ)·∇ln π_θ(yᵢ|xᵢ)` on unclipped records and zero on
//! clipped ones (the ratio is clipped when it reaches `M`).

use std::sync::Arc;

use crate::divergence::{boltzmann_weights, LossSample};
use crate::error::{check_dim, Error, Result};
use crate::policy::{
    add_scaled_score, log_prob_from_logits, logits_unchecked, sigmoid, ActionVector, FeatureVector, PolicyParams,
};

/// Variance below which the POEM penalty is treated as flat.
const VARIANCE_FLOOR: f64 = 1e-12;

// ── Logged data ─────────────────────────────────────────────────────────

/// One logged interaction `(x, y, p, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditRecord {
    /// Index of the supervised example the context came from.
    pub example_id: usize,
    /// Pass through the data that produced this record.
    pub replay: usize,
    pub x: Arc<FeatureVector>,
    pub y: ActionVector,
    /// Logging probability `π₀(y|x)` in `(0, 1]`.
    pub propensity: f64,
    /// Cost after scaling (see [`CostScale`]).
    pub cost: f64,
}

/// Affine map `scaled = raw·scale + offset` applied to costs before logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostScale {
    pub scale: f64,
    pub offset: f64,
}

impl CostScale {
    pub const IDENTITY: CostScale = CostScale {
        scale: 1.0,
        offset: 0.0,
    };

    /// Maps a Hamming loss over `labels` bits onto `[−1, 0]`.
    pub fn hamming(labels: usize) -> Self {
        Self {
            scale: 1.0 / labels as f64,
            offset: -1.0,
        }
    }

    pub fn apply(&self, raw: f64) -> f64 {
        raw * self.scale + self.offset
    }

    pub fn invert(&self, scaled: f64) -> f64 {
        (scaled - self.offset) / self.scale
    }
}

/// A non-empty log of bandit records with its clipping constant.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditLog {
    records: Vec<BanditRecord>,
    clip_m: f64,
    cost_scale: CostScale,
    labels: usize,
    features: usize,
}

impl BanditLog {
    pub fn new(records: Vec<BanditRecord>, clip_m: f64, cost_scale: CostScale) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::contract("bandit log must contain records"))?;
        if !(clip_m > 0.0) {
            return Err(Error::contract(format!("clip constant must be > 0, got {clip_m}")));
        }
        let labels = first.y.len();
        let features = first.x.dim();
        for r in &records {
            check_dim("record action length", labels, r.y.len())?;
            check_dim("record feature dimension", features, r.x.dim())?;
            if !(r.propensity > 0.0 && r.propensity <= 1.0) {
                return Err(Error::contract(format!(
                    "propensity must lie in (0, 1], got {}",
                    r.propensity
                )));
            }
            if !r.cost.is_finite() {
                return Err(Error::contract("costs must be finite"));
            }
        }
        Ok(Self {
            records,
            clip_m,
            cost_scale,
            labels,
            features,
        })
    }

    pub fn records(&self) -> &[BanditRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clip_m(&self) -> f64 {
        self.clip_m
    }

    pub fn cost_scale(&self) -> CostScale {
        self.cost_scale
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn with_clip(mut self, clip_m: f64) -> Result<Self> {
        if !(clip_m > 0.0) {
            return Err(Error::contract(format!("clip constant must be > 0, got {clip_m}")));
        }
        self.clip_m = clip_m;
        Ok(self)
    }

    pub fn propensities(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.propensity).collect()
    }

    /// Same records in a different order.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        check_dim("permutation length", self.len(), order.len())?;
        let records = order.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(records, self.clip_m, self.cost_scale)
    }

    fn check_params(&self, params: &PolicyParams) -> Result<()> {
        check_dim("policy labels", self.labels, params.labels())?;
        check_dim("policy features", self.features, params.features())
    }
}

// ── Per-record losses ───────────────────────────────────────────────────

/// Clipped losses `zᵢ` with the unclipped ratios and the clip mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLosses {
    pub losses: Vec<f64>,
    pub ratios: Vec<f64>,
    pub clipped: Vec<bool>,
}

/// Losses plus the label probabilities needed for the score function.
struct Evaluated {
    sample: SampleLosses,
    probs: Vec<f64>,
}

fn evaluate_records(params: &PolicyParams, log: &BanditLog) -> Result<Evaluated> {
    log.check_params(params)?;
    let q = params.labels();
    let n = log.len();
    let mut losses = Vec::with_capacity(n);
    let mut ratios = Vec::with_capacity(n);
    let mut clipped = Vec::with_capacity(n);
    let mut probs = vec![0.0; n * q];
    let mut logits = vec![0.0; q];
    for (i, r) in log.records().iter().enumerate() {
        logits_unchecked(params, &r.x, &mut logits);
        for (slot, &u) in probs[i * q..(i + 1) * q].iter_mut().zip(&logits) {
            *slot = sigmoid(u);
        }
        let log_ratio = log_prob_from_logits(&logits, &r.y).min(0.0) - r.propensity.ln();
        let ratio = log_ratio.exp();
        let is_clipped = ratio >= log.clip_m();
        losses.push(r.cost * if is_clipped { log.clip_m() } else { ratio });
        ratios.push(ratio);
        clipped.push(is_clipped);
    }
    Ok(Evaluated {
        sample: SampleLosses {
            losses,
            ratios,
            clipped,
        },
        probs,
    })
}

impl Evaluated {
    /// `Σᵢ sensitivityᵢ·∇zᵢ`.
    fn gradient(&self, params: &PolicyParams, log: &BanditLog, sensitivity: &[f64]) -> Vec<f64> {
        let q = params.labels();
        let mut grad = vec![0.0; params.as_slice().len()];
        for (i, r) in log.records().iter().enumerate() {
            if self.sample.clipped[i] || sensitivity[i] == 0.0 {
                continue;
            }
            let scale = sensitivity[i] * r.cost * self.sample.ratios[i];
            if scale == 0.0 {
                continue;
            }
            add_scaled_score(
                &mut grad,
                params.features(),
                &r.x,
                &r.y,
                &self.probs[i * q..(i + 1) * q],
                scale,
            );
        }
        grad
    }
}

pub fn sample_losses(params: &PolicyParams, log: &BanditLog) -> Result<SampleLosses> {
    Ok(evaluate_records(params, log)?.sample)
}

/// Unclipped inverse propensity estimate `(1/n) Σ cᵢ·π_θ(yᵢ|xᵢ)/pᵢ`.
pub fn ips_risk(params: &PolicyParams, log: &BanditLog) -> Result<f64> {
    let sample = sample_losses(params, log)?;
    let n = log.len() as f64;
    Ok(log
        .records()
        .iter()
        .zip(&sample.ratios)
        .map(|(r, ratio)| r.cost * ratio)
        .sum::<f64>()
        / n)
}

// ── Risk reports ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct RiskReport {
    pub risk: f64,
    pub losses: Vec<f64>,
    /// Weights the objective places on each loss (a probability vector).
    pub weights: Vec<f64>,
    /// Variance of the losses with divisor `n`.
    pub variance: f64,
    /// θ-gradient, laid out like [`PolicyParams::as_slice`].
    pub gradient: Vec<f64>,
    pub gamma_used: Option<f64>,
    /// Constant losses forced a fallback (uniform weights, no temperature).
    pub degenerate: bool,
    pub clipped: usize,
}

fn mean_and_variance(z: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// How the adaptive temperature is computed from the losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GammaRule {
    /// `√(Σ(zᵢ − z̄)² / (2ε))`.
    #[default]
    SumOfSquares,
    /// `√(Vₙ / (2ε))`.
    Variance,
}

impl GammaRule {
    fn divisor(self, n: usize) -> f64 {
        match self {
            GammaRule::SumOfSquares => 1.0,
            GammaRule::Variance => n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveOptions {
    pub gamma_rule: GammaRule,
    /// Differentiate through the Boltzmann weights (and the adaptive
    /// temperature) instead of holding them fixed for the gradient.
    pub differentiate_weights: bool,
}

/// The four counterfactual objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CrmObjective {
    Cips,
    Poem { lambda: f64 },
    KlCrm { gamma: f64 },
    AklCrm { epsilon: f64 },
}

impl CrmObjective {
    pub fn evaluate(&self, params: &PolicyParams, log: &BanditLog, options: &ObjectiveOptions) -> Result<RiskReport> {
        match *self {
            CrmObjective::Cips => cips_risk(params, log),
            CrmObjective::Poem { lambda } => poem_objective(params, log, lambda),
            CrmObjective::KlCrm { gamma } => kl_crm_with(params, log, gamma, options),
            CrmObjective::AklCrm { epsilon } => akl_crm_with(params, log, epsilon, options),
        }
    }
}

fn report(
    ev: Evaluated,
    params: &PolicyParams,
    log: &BanditLog,
    risk: f64,
    weights: Vec<f64>,
    sensitivity: &[f64],
) -> RiskReport {
    let gradient = ev.gradient(params, log, sensitivity);
    let (_, variance) = mean_and_variance(&ev.sample.losses);
    let clipped = ev.sample.clipped.iter().filter(|&&c| c).count();
    RiskReport {
        risk,
        losses: ev.sample.losses,
        weights,
        variance,
        gradient,
        gamma_used: None,
        degenerate: false,
        clipped,
    }
}

/// Clipped IPS risk `mean(z)`.
pub fn cips_risk(params: &PolicyParams, log: &BanditLog) -> Result<RiskReport> {
    let ev = evaluate_records(params, log)?;
    let n = log.len();
    let (mean, _) = mean_and_variance(&ev.sample.losses);
    let uniform = vec![1.0 / n as f64; n];
    Ok(report(ev, params, log, mean, uniform.clone(), &uniform))
}

/// Sample-variance penalised risk `mean(z) + λ·√(Vₙ/n)`.
pub fn poem_objective(params: &PolicyParams, log: &BanditLog, lambda: f64) -> Result<RiskReport> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::contract(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let n = log.len();
    if lambda > 0.0 && n < 2 {
        return Err(Error::contract("variance penalty needs at least two records"));
    }
    let ev = evaluate_records(params, log)?;
    let nf = n as f64;
    let (mean, var) = mean_and_variance(&ev.sample.losses);
    let risk = mean + lambda * (var / nf).sqrt();
    let sensitivity: Vec<f64> = if var < VARIANCE_FLOOR || lambda == 0.0 {
        vec![1.0 / nf; n]
    } else {
        let denom = nf * (nf * var).sqrt();
        ev.sample
            .losses
            .iter()
            .map(|z| 1.0 / nf + lambda * (z - mean) / denom)
            .collect()
    };
    Ok(report(ev, params, log, risk, vec![1.0 / nf; n], &sensitivity))
}

/// Boltzmann-reweighted risk `Σ sᵢzᵢ` at a fixed temperature; the weights are
/// held fixed for the gradient.
pub fn kl_crm_objective(params: &PolicyParams, log: &BanditLog, gamma: f64) -> Result<RiskReport> {
    kl_crm_with(params, log, gamma, &ObjectiveOptions::default())
}

/// Adaptive KL objective: the temperature is re-derived from the current
/// losses on every evaluation, with the default [`ObjectiveOptions`].
pub fn akl_crm_objective(params: &PolicyParams, log: &BanditLog, epsilon: f64) -> Result<RiskReport> {
    akl_crm_with(params, log, epsilon, &ObjectiveOptions::default())
}

fn reweighted(losses: &[f64], gamma: f64) -> Result<(Vec<f64>, f64)> {
    let sample = LossSample::uniform(losses.to_vec())?;
    let weights = boltzmann_weights(&sample, gamma)?;
    let risk = weights.iter().zip(losses).map(|(s, z)| s * z).sum();
    Ok((weights, risk))
}

pub fn kl_crm_with(
    params: &PolicyParams,
    log: &BanditLog,
    gamma: f64,
    options: &ObjectiveOptions,
) -> Result<RiskReport> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::contract(format!(
            "temperature must be finite and > 0, got {gamma}"
        )));
    }
    let ev = evaluate_records(params, log)?;
    let (weights, risk) = reweighted(&ev.sample.losses, gamma)?;
    let sensitivity: Vec<f64> = if options.differentiate_weights {
        weights
            .iter()
            .zip(&ev.sample.losses)
            .map(|(s, z)| s * (1.0 + (z - risk) / gamma))
            .collect()
    } else {
        weights.clone()
    };
    let mut out = report(ev, params, log, risk, weights, &sensitivity);
    out.gamma_used = Some(gamma);
    Ok(out)
}

/// Adaptive temperature for a loss vector, `None` when the losses are constant.
pub fn adaptive_gamma(losses: &[f64], epsilon: f64, rule: GammaRule) -> Option<f64> {
    let (mean, _) = mean_and_variance(losses);
    let sum_sq: f64 = losses.iter().map(|z| (z - mean) * (z - mean)).sum();
    let gamma = (sum_sq / (2.0 * epsilon * rule.divisor(losses.len()))).sqrt();
    (gamma > 0.0).then_some(gamma)
}

pub fn akl_crm_with(
    params: &PolicyParams,
    log: &BanditLog,
    epsilon: f64,
    options: &ObjectiveOptions,
) -> Result<RiskReport> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::contract(format!("radius must be finite and > 0, got {epsilon}")));
    }
    let ev = evaluate_records(params, log)?;
    let n = log.len();
    let Some(gamma) = adaptive_gamma(&ev.sample.losses, epsilon, options.gamma_rule) else {
        let uniform = vec![1.0 / n as f64; n];
        let (mean, _) = mean_and_variance(&ev.sample.losses);
        let mut out = report(ev, params, log, mean, uniform.clone(), &uniform);
        out.degenerate = true;
        return Ok(out);
    };
    let (weights, risk) = reweighted(&ev.sample.losses, gamma)?;
    let sensitivity: Vec<f64> = if options.differentiate_weights {
        let z = &ev.sample.losses;
        let (mean, _) = mean_and_variance(z);
        let tilted_var: f64 = weights.iter().zip(z).map(|(s, zi)| s * (zi - risk) * (zi - risk)).sum();
        // ∂L/∂γ · ∂γ/∂zₖ with γ = √(Σ(z−z̄)²/(2ε·c)).
        let through_gamma = tilted_var / (gamma * gamma) / (2.0 * epsilon * options.gamma_rule.divisor(n) * gamma);
        weights
            .iter()
            .zip(z)
            .map(|(s, zi)| s * (1.0 + (zi - risk) / gamma) - through_gamma * (zi - mean))
            .collect()
    } else {
        weights.clone()
    };
    let mut out = report(ev, params, log, risk, weights, &sensitivity);
    out.gamma_used = Some(gamma);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::robust_risk_chi2;
    use crate::policy::{log_prob, sample_action};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A random log drawn from a random logger, plus a random evaluation policy.
    fn random_setup(rng: &mut ChaCha8Rng, n: usize, q: usize, d: usize) -> (PolicyParams, BanditLog) {
        let rand_params = |rng: &mut ChaCha8Rng| {
            let w = (0..q * d).map(|_| rng.random_range(-0.8..0.8)).collect();
            PolicyParams::from_weights(q, d, w).unwrap()
        };
        let logger = rand_params(rng);
        let records = (0..n)
            .map(|i| {
                let dense: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let x = Arc::new(FeatureVector::from_dense(&dense).unwrap());
                let (y, propensity) = sample_action(&logger, &x, rng).unwrap();
                BanditRecord {
                    example_id: i,
                    replay: 0,
                    x,
                    y,
                    propensity,
                    cost: -rng.random_range(0.05..1.0),
                }
            })
            .collect();
        let log = BanditLog::new(records, 1e18, CostScale::IDENTITY).unwrap();
        (rand_params(rng), log)
    }

    /// Central differences of `f` at `params`.
    fn numeric_gradient(params: &PolicyParams, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..params.as_slice().len())
            .map(|k| {
                let mut plus = params.clone();
                plus.as_mut_slice()[k] += h;
                let mut minus = params.clone();
                minus.as_mut_slice()[k] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let norm: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / norm.max(1e-12)
    }

    #[test]
    fn losses_equal_costs_under_logger() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, log) = random_setup(&mut rng, 1, 2, 3);
        // Rebuild the record so its propensity is exactly the policy's own probability.
        let params = PolicyParams::from_weights(2, 3, vec![0.2, -0.1, 0.3, 0.5, 0.0, -0.4]).unwrap();
        let r = &log.records()[0];
        let p = log_prob(&params, &r.x, &r.y).unwrap().exp();
        let rec = BanditRecord {
            propensity: p,
            ..r.clone()
        };
        let log = BanditLog::new(vec![rec.clone()], 1.0, CostScale::IDENTITY).unwrap();
        let s = sample_losses(&params, &log).unwrap();
        assert_relative_eq!(s.losses[0], rec.cost, epsilon = 1e-12);
        assert_relative_eq!(ips_risk(&params, &log).unwrap(), rec.cost, epsilon = 1e-12);
    }

    #[test]
    fn clipping_example() {
        // One label with σ(u) = 0.9 and a logged propensity of 0.1: ratio 9 > M = 5.
        let u = (0.9f64 / 0.1).ln();
        let params = PolicyParams::from_weights(1, 1, vec![u]).unwrap();
        let rec = BanditRecord {
            example_id: 0,
            replay: 0,
            x: Arc::new(FeatureVector::from_dense(&[1.0]).unwrap()),
            y: ActionVector::new(vec![true]),
            propensity: 0.1,
            cost: -0.7,
        };
        let log = BanditLog::new(vec![rec], 5.0, CostScale::IDENTITY).unwrap();
        let s = sample_losses(&params, &log).unwrap();
        assert!(s.clipped[0]);
        assert_relative_eq!(s.losses[0], 5.0 * -0.7, epsilon = 1e-12);
        let report = cips_risk(&params, &log).unwrap();
        assert!(report.gradient.iter().all(|&g| g == 0.0));
        assert_relative_eq!(ips_risk(&params, &log).unwrap(), -0.7 * 9.0, epsilon = 1e-10);
    }

    #[test]
    fn losses_match_enumerated_normaliser() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (params, log) = random_setup(&mut rng, 20, 2, 3);
        let s = sample_losses(&params, &log).unwrap();
        for (i, r) in log.records().iter().enumerate() {
            let u: Vec<f64> = (0..2).map(|l| r.x.dot(params.row(l))).collect();
            let score = |y: &ActionVector| -> f64 {
                y.bits()
                    .iter()
                    .zip(&u)
                    .map(|(&b, &v)| if b { v } else { 0.0 })
                    .sum::<f64>()
                    .exp()
            };
            let z: f64 = ActionVector::enumerate(2).map(|y| score(&y)).sum();
            let expect = r.cost * score(&r.y) / z / r.propensity;
            assert_relative_eq!(s.losses[i], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn ips_agrees_with_unclipped_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (params, log) = random_setup(&mut rng, 30, 3, 4);
        let cips = cips_risk(&params, &log).unwrap();
        assert_relative_eq!(ips_risk(&params, &log).unwrap(), cips.risk, epsilon = 1e-14);
    }

    #[test]
    fn symmetric_two_record_log() {
        let x = Arc::new(FeatureVector::from_dense(&[1.0]).unwrap());
        let rec = |bit: bool, cost: f64| BanditRecord {
            example_id: 0,
            replay: 0,
            x: x.clone(),
            y: ActionVector::new(vec![bit]),
            propensity: 0.5,
            cost,
        };
        let log = BanditLog::new(vec![rec(true, -1.0), rec(false, -0.5)], 10.0, CostScale::IDENTITY).unwrap();
        let params = PolicyParams::zeros(1, 1);
        // θ = 0 reproduces the uniform logger: both ratios are 1.
        assert_relative_eq!(cips_risk(&params, &log).unwrap().risk, -0.75, epsilon = 1e-15);
    }

    #[test]
    fn poem_reduces_to_cips_and_matches_chi2() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (params, log) = random_setup(&mut rng, 25, 2, 3);
        let cips = cips_risk(&params, &log).unwrap();
        let poem0 = poem_objective(&params, &log, 0.0).unwrap();
        assert_eq!(poem0.risk, cips.risk);
        assert_eq!(poem0.gradient, cips.gradient);

        let lambda = 0.3;
        let poem = poem_objective(&params, &log, lambda).unwrap();
        let n = log.len() as f64;
        let chi = robust_risk_chi2(&LossSample::uniform(poem.losses.clone()).unwrap(), lambda * lambda / n).unwrap();
        assert!((poem.risk - chi.robust_risk).abs() <= 1e-10);
    }

    #[test]
    fn poem_constant_losses_have_no_penalty() {
        let x = Arc::new(FeatureVector::from_dense(&[1.0]).unwrap());
        let records = (0..3)
            .map(|i| BanditRecord {
                example_id: i,
                replay: 0,
                x: x.clone(),
                y: ActionVector::new(vec![true]),
                propensity: 0.5,
                cost: -1.0,
            })
            .collect();
        let log = BanditLog::new(records, 10.0, CostScale::IDENTITY).unwrap();
        let params = PolicyParams::zeros(1, 1);
        let r = poem_objective(&params, &log, 2.0).unwrap();
        assert_relative_eq!(r.risk, -1.0, epsilon = 1e-15);
        assert_eq!(r.variance, 0.0);
    }

    #[test]
    fn poem_rejects_single_record_with_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (params, log) = random_setup(&mut rng, 1, 1, 2);
        assert!(poem_objective(&params, &log, 0.5).is_err());
        assert!(poem_objective(&params, &log, 0.0).is_ok());
    }

    #[test]
    fn kl_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (params, log) = random_setup(&mut rng, 30, 2, 3);
        let cips = cips_risk(&params, &log).unwrap();
        let hot = kl_crm_objective(&params, &log, 1e9).unwrap();
        assert!((hot.risk - cips.risk).abs() < 1e-8);
        let range = cips.losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - cips.losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let cold = kl_crm_objective(&params, &log, 1e-6 * range).unwrap();
        let max = cips.losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((cold.risk - max).abs() < 1e-6);
        assert!(kl_crm_objective(&params, &log, 0.0).is_err());
    }

    #[test]
    fn akl_examples() {
        // Two single-label records with θ = 0 and propensity 0.5: ratios are 1, z = costs.
        let x = Arc::new(FeatureVector::from_dense(&[1.0]).unwrap());
        let rec = |cost: f64| BanditRecord {
            example_id: 0,
            replay: 0,
            x: x.clone(),
            y: ActionVector::new(vec![true]),
            propensity: 0.5,
            cost,
        };
        let params = PolicyParams::zeros(1, 1);
        let log = BanditLog::new(vec![rec(1.0), rec(0.0)], 10.0, CostScale::IDENTITY).unwrap();
        let r = akl_crm_objective(&params, &log, 0.25).unwrap();
        let e = std::f64::consts::E;
        assert_relative_eq!(r.gamma_used.unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(r.risk, e / (e + 1.0), epsilon = 1e-15);

        let hard = akl_crm_objective(&params, &log, 1e12).unwrap();
        assert!(hard.gamma_used.unwrap() < 1e-6);
        assert_relative_eq!(hard.risk, 1.0, epsilon = 1e-12);

        let flat = BanditLog::new(vec![rec(-0.3), rec(-0.3)], 10.0, CostScale::IDENTITY).unwrap();
        let r = akl_crm_objective(&params, &flat, 0.1).unwrap();
        assert!(r.degenerate);
        assert_relative_eq!(r.risk, -0.3, epsilon = 1e-15);
        assert_eq!(r.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn gamma_rules_differ_by_sample_size() {
        let z = [1.0, 0.0, 0.5, 0.25];
        let sum_sq = adaptive_gamma(&z, 0.1, GammaRule::SumOfSquares).unwrap();
        let var = adaptive_gamma(&z, 0.1, GammaRule::Variance).unwrap();
        assert_relative_eq!(sum_sq / var, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (params, log) = random_setup(&mut rng, 15, 2, 3);
            let cips = cips_risk(&params, &log).unwrap();
            let fd = numeric_gradient(&params, |p| cips_risk(p, &log).unwrap().risk);
            assert!(rel_err(&cips.gradient, &fd) < 1e-5);

            let poem = poem_objective(&params, &log, 0.7).unwrap();
            let fd = numeric_gradient(&params, |p| poem_objective(p, &log, 0.7).unwrap().risk);
            assert!(rel_err(&poem.gradient, &fd) < 1e-5);

            // Frozen weights: differentiate Σ s̄ᵢ zᵢ(θ) with s̄ held at the base point.
            let kl = kl_crm_objective(&params, &log, 0.2).unwrap();
            let frozen = kl.weights.clone();
            let surrogate = |p: &PolicyParams| -> f64 {
                let z = sample_losses(p, &log).unwrap().losses;
                frozen.iter().zip(&z).map(|(s, zi)| s * zi).sum()
            };
            assert!(rel_err(&kl.gradient, &numeric_gradient(&params, surrogate)) < 1e-5);

            let akl = akl_crm_objective(&params, &log, 0.05).unwrap();
            let frozen = akl.weights.clone();
            let surrogate = |p: &PolicyParams| -> f64 {
                let z = sample_losses(p, &log).unwrap().losses;
                frozen.iter().zip(&z).map(|(s, zi)| s * zi).sum()
            };
            assert!(rel_err(&akl.gradient, &numeric_gradient(&params, surrogate)) < 1e-5);
        }
    }

    #[test]
    fn full_weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let opts = ObjectiveOptions {
            differentiate_weights: true,
            ..Default::default()
        };
        let var_opts = ObjectiveOptions {
            gamma_rule: GammaRule::Variance,
            ..opts
        };
        for _ in 0..20 {
            let (params, log) = random_setup(&mut rng, 12, 2, 3);
            let kl = kl_crm_with(&params, &log, 0.3, &opts).unwrap();
            let fd = numeric_gradient(&params, |p| kl_crm_with(p, &log, 0.3, &opts).unwrap().risk);
            assert!(rel_err(&kl.gradient, &fd) < 1e-5);
            for o in [opts, var_opts] {
                let akl = akl_crm_with(&params, &log, 0.05, &o).unwrap();
                let fd = numeric_gradient(&params, |p| akl_crm_with(p, &log, 0.05, &o).unwrap().risk);
                assert!(rel_err(&akl.gradient, &fd) < 1e-5, "{:?}", o.gamma_rule);
            }
        }
    }

    #[test]
    fn objectives_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (params, log) = random_setup(&mut rng, 10, 2, 3);
        let order: Vec<usize> = (0..10).rev().collect();
        let shuffled = log.permuted(&order).unwrap();
        for obj in [
            CrmObjective::Cips,
            CrmObjective::Poem { lambda: 0.5 },
            CrmObjective::KlCrm { gamma: 0.1 },
            CrmObjective::AklCrm { epsilon: 0.1 },
        ] {
            let a = obj.evaluate(&params, &log, &ObjectiveOptions::default()).unwrap();
            let b = obj.evaluate(&params, &shuffled, &ObjectiveOptions::default()).unwrap();
            assert!((a.risk - b.risk).abs() < 1e-12, "{obj:?}");
        }
    }

    #[test]
    fn log_validation() {
        let x = Arc::new(FeatureVector::from_dense(&[1.0]).unwrap());
        let rec = BanditRecord {
            example_id: 0,
            replay: 0,
            x,
            y: ActionVector::new(vec![true]),
            propensity: 0.0,
            cost: 0.0,
        };
        assert!(BanditLog::new(vec![rec.clone()], 1.0, CostScale::IDENTITY).is_err());
        assert!(BanditLog::new(vec![], 1.0, CostScale::IDENTITY).is_err());
        let ok = BanditRecord { propensity: 1.0, ..rec };
        assert!(BanditLog::new(vec![ok.clone()], 0.0, CostScale::IDENTITY).is_err());
        let log = BanditLog::new(vec![ok], 1.0, CostScale::IDENTITY).unwrap();
        assert!(cips_risk(&PolicyParams::zeros(2, 1), &log).is_err());
        let scale = CostScale::hamming(4);
        assert_eq!(scale.apply(0.0), -1.0);
        assert_eq!(scale.apply(4.0), 0.0);
        assert_eq!(scale.invert(scale.apply(3.0)), 3.0);
    }
}
