//! φ-divergences and robust risks over a finite loss sample.
//!
//! Given losses `z` drawn under a base distribution `p̂` (usually uniform), the
//! robust risk is the largest expectation of `z` over all distributions `q`
//! with `D_φ(q‖p̂) ≤ ε`. Two generators are supported:
//!
//! - χ²: `φ(t) = (t−1)²`, for which the robust risk has the closed form
//!   `mean + √(ε·V)` as long as the maximiser stays inside the simplex.
//! - Kullback-Leibler: `φ(t) = t·ln t − t + 1`, whose robust risk is the
//!   one-dimensional dual `inf_γ γε + γ·ln E[exp(z/γ)]`, attained by a
//!   Boltzmann reweighting of the sample.
//!
//! [`dro_oracle`] solves the primal program directly with a barrier method and
//! is meant for verifying the other routines on small samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
const SIMPLEX_TOL: f64 = 1e-12;

/// Largest sample handled by [`dro_oracle`].
pub const ORACLE_MAX_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DivergenceKind {
    ChiSquare,
    KullbackLeibler,
}

/// A value on the extended half-line: finite, or `+∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhiValue {
    Finite(f64),
    Infinite,
}

impl PhiValue {
    pub fn is_finite(self) -> bool {
        matches!(self, PhiValue::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            PhiValue::Finite(v) => Some(v),
            PhiValue::Infinite => None,
        }
    }

    /// `true` when the value is finite and at most `bound`.
    pub fn at_most(self, bound: f64) -> bool {
        matches!(self, PhiValue::Finite(v) if v <= bound)
    }
}

impl DivergenceKind {
    pub fn phi(self, t: f64) -> PhiValue {
        phi_value(self, t)
    }

    pub fn conjugate(self, u: f64) -> f64 {
        phi_conjugate(self, u)
    }

    /// Second derivative of the generator at `t = 1`.
    pub fn curvature(self) -> f64 {
        match self {
            DivergenceKind::ChiSquare => 2.0,
            DivergenceKind::KullbackLeibler => 1.0,
        }
    }
}

pub fn phi_value(kind: DivergenceKind, t: f64) -> PhiValue {
    if t.is_nan() || t < 0.0 {
        return PhiValue::Infinite;
    }
    match kind {
        DivergenceKind::ChiSquare => {
            let v = (t - 1.0) * (t - 1.0);
            if v.is_finite() {
                PhiValue::Finite(v)
            } else {
                PhiValue::Infinite
            }
        }
        DivergenceKind::KullbackLeibler => {
            if t == 0.0 {
                return PhiValue::Finite(1.0);
            }
            let v = t * t.ln() - t + 1.0;
            if v.is_finite() {
                PhiValue::Finite(v)
            } else {
                PhiValue::Infinite
            }
        }
    }
}

/// Convex conjugate `φ*(u) = sup_{t ≥ 0} u·t − φ(t)`.
pub fn phi_conjugate(kind: DivergenceKind, u: f64) -> f64 {
    match kind {
        DivergenceKind::KullbackLeibler => u.exp_m1(),
        DivergenceKind::ChiSquare => {
            if u >= -2.0 {
                u + 0.25 * u * u
            } else {
                -1.0
            }
        }
    }
}

/// `D_φ(q‖p) = Σ pᵢ·φ(qᵢ/pᵢ)`, with `0·φ(0/0) = 0` and `+∞` when `q` puts
/// mass where `p` has none.
pub fn divergence(kind: DivergenceKind, q: &[f64], p: &[f64]) -> Result<PhiValue> {
    crate::error::check_dim("divergence operands", p.len(), q.len())?;
    let mut total = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if qi < 0.0 || qi.is_nan() {
            return Ok(PhiValue::Infinite);
        }
        if pi <= 0.0 {
            if qi > 0.0 {
                return Ok(PhiValue::Infinite);
            }
            continue;
        }
        let term = match kind {
            DivergenceKind::ChiSquare => (qi - pi) * (qi - pi) / pi,
            DivergenceKind::KullbackLeibler => {
                if qi == 0.0 {
                    pi
                } else {
                    qi * (qi / pi).ln() - qi + pi
                }
            }
        };
        total += term;
    }
    if total.is_finite() {
        Ok(PhiValue::Finite(total))
    } else {
        Ok(PhiValue::Infinite)
    }
}

// ── Loss samples ────────────────────────────────────────────────────────

/// Finite losses together with the base distribution they are drawn under.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSample {
    values: Vec<f64>,
    base_weights: Vec<f64>,
}

impl LossSample {
    /// Losses under the uniform empirical distribution.
    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::contract("loss sample must be non-empty"));
        }
        let w = 1.0 / n as f64;
        Self::weighted(values, vec![w; n])
    }

    pub fn weighted(values: Vec<f64>, base_weights: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("loss sample must be non-empty"));
        }
        crate::error::check_dim("base weights", values.len(), base_weights.len())?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!("loss values must be finite, got {v}")));
        }
        if base_weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::contract("base weights must be finite and nonnegative"));
        }
        let total: f64 = base_weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::contract(format!("base weights must sum to one, got {total}")));
        }
        Ok(Self { values, base_weights })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn base_weights(&self) -> &[f64] {
        &self.base_weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.base_weights).map(|(z, p)| z * p).sum()
    }

    /// Variance under the base distribution (divisor `n` for uniform weights).
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.values
            .iter()
            .zip(&self.base_weights)
            .map(|(z, p)| p * (z - mean) * (z - mean))
            .sum()
    }

    /// Largest loss among points with positive base weight.
    pub fn max(&self) -> f64 {
        self.supported().map(|(z, _)| z).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.supported().map(|(z, _)| z).fold(f64::INFINITY, f64::min)
    }

    pub fn range(&self) -> f64 {
        self.max() - self.min()
    }

    /// The same sample with every loss shifted by `c`.
    pub fn shifted(&self, c: f64) -> Result<Self> {
        Self::weighted(self.values.iter().map(|z| z + c).collect(), self.base_weights.clone())
    }

    fn supported(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.base_weights)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&z, &p)| (z, p))
    }

    /// Base mass sitting on the largest loss.
    fn max_mass(&self) -> f64 {
        let zmax = self.max();
        self.supported().filter(|&(z, _)| z == zmax).map(|(_, p)| p).sum()
    }

    /// Base weights restricted to the largest loss and renormalised.
    fn max_concentrated(&self) -> Vec<f64> {
        let zmax = self.max();
        let mass = self.max_mass();
        self.values
            .iter()
            .zip(&self.base_weights)
            .map(|(&z, &p)| if z == zmax && p > 0.0 { p / mass } else { 0.0 })
            .collect()
    }
}

/// Solution of the inner maximisation of a robust risk.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub robust_risk: f64,
    /// Optimal temperature (KL only; `None` for χ² and degenerate samples).
    pub gamma: Option<f64>,
    pub worst_case_weights: Vec<f64>,
    /// The radius is large enough that the worst case sits on the maximum loss.
    pub saturated: bool,
}

impl DualSolution {
    fn degenerate(sample: &LossSample) -> Self {
        Self {
            robust_risk: sample.mean(),
            gamma: None,
            worst_case_weights: sample.base_weights.clone(),
            saturated: false,
        }
    }

    fn max_loss(sample: &LossSample) -> Self {
        Self {
            robust_risk: sample.max(),
            gamma: None,
            worst_case_weights: sample.max_concentrated(),
            saturated: true,
        }
    }
}

fn check_radius(epsilon: f64, strict: bool) -> Result<()> {
    let ok = if strict { epsilon > 0.0 } else { epsilon >= 0.0 };
    if !ok || !epsilon.is_finite() {
        let bound = if strict { "> 0" } else { ">= 0" };
        return Err(Error::contract(format!(
            "radius must be finite and {bound}, got {epsilon}"
        )));
    }
    Ok(())
}

// ── χ² ──────────────────────────────────────────────────────────────────

/// χ² robust risk `sup { E_q[z] : Σ (qᵢ−p̂ᵢ)²/p̂ᵢ ≤ ε }`.
///
/// Inside the simplex the maximiser is `qᵢ = p̂ᵢ(1 + √(ε/V)(zᵢ − mean))` and the
/// value is `mean + √(εV)`. When that vector has negative entries the lowest
/// losses are zeroed out group by group and the problem is re-solved on the
/// remaining face; the best feasible face is the optimum.
pub fn robust_risk_chi2(sample: &LossSample, epsilon: f64) -> Result<DualSolution> {
    check_radius(epsilon, false)?;
    let variance = sample.variance();
    if sample.len() == 1 || variance == 0.0 || epsilon == 0.0 {
        return Ok(DualSolution::degenerate(sample));
    }
    let z = sample.values();
    let p = sample.base_weights();
    let mean = sample.mean();
    let scale = (epsilon / variance).sqrt();
    let interior: Vec<f64> = z
        .iter()
        .zip(p)
        .map(|(&zi, &pi)| pi * (1.0 + scale * (zi - mean)))
        .collect();
    if interior.iter().all(|&q| q >= 0.0) {
        return Ok(DualSolution {
            robust_risk: mean + (epsilon * variance).sqrt(),
            gamma: None,
            worst_case_weights: interior,
            saturated: false,
        });
    }
    Ok(chi2_active_set(sample, epsilon))
}

fn chi2_active_set(sample: &LossSample, epsilon: f64) -> DualSolution {
    let z = sample.values();
    let p = sample.base_weights();
    let mut order: Vec<usize> = (0..z.len()).filter(|&i| p[i] > 0.0).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]));

    // Group boundaries over distinct loss values, ascending.
    let mut starts = vec![0];
    for k in 1..order.len() {
        if z[order[k]] != z[order[k - 1]] {
            starts.push(k);
        }
    }

    let mut best: Option<DualSolution> = None;
    for &start in starts.iter().skip(1) {
        let (dropped, kept) = order.split_at(start);
        let dropped_mass: f64 = dropped.iter().map(|&i| p[i]).sum();
        let kept_mass: f64 = kept.iter().map(|&i| p[i]).sum();
        let slack = epsilon - dropped_mass / kept_mass;
        if slack < 0.0 {
            // Dropping more mass only increases the χ² cost.
            break;
        }
        let shift = dropped_mass / kept_mass;
        let kept_mean = kept.iter().map(|&i| p[i] * z[i]).sum::<f64>() / kept_mass;
        let spread: f64 = kept
            .iter()
            .map(|&i| p[i] * (z[i] - kept_mean) * (z[i] - kept_mean))
            .sum();
        let scale = if spread > 0.0 { (slack / spread).sqrt() } else { 0.0 };

        let mut weights = vec![0.0; z.len()];
        let mut feasible = true;
        for &i in kept {
            let q = p[i] * (1.0 + shift + scale * (z[i] - kept_mean));
            if q < -1e-14 {
                feasible = false;
                break;
            }
            weights[i] = q.max(0.0);
        }
        if !feasible {
            continue;
        }
        let risk = kept_mean + (slack * spread).sqrt();
        let saturated = spread == 0.0;
        if best.as_ref().is_none_or(|b| risk > b.robust_risk) {
            best = Some(DualSolution {
                robust_risk: risk,
                gamma: None,
                worst_case_weights: weights,
                saturated,
            });
        }
    }
    best.unwrap_or_else(|| DualSolution::max_loss(sample))
}

// ── Kullback-Leibler ────────────────────────────────────────────────────

/// Boltzmann reweighting `sᵢ ∝ p̂ᵢ·exp(zᵢ/γ)`, computed with a max shift.
pub fn boltzmann_weights(sample: &LossSample, gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::contract(format!(
            "temperature must be finite and > 0, got {gamma}"
        )));
    }
    Ok(tilt(sample, gamma).weights)
}

/// Reweighted mean `Σ sᵢzᵢ` at a fixed temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightedRisk {
    pub risk: f64,
    pub weights: Vec<f64>,
}

pub fn robust_risk_kl_fixed_gamma(sample: &LossSample, gamma: f64) -> Result<ReweightedRisk> {
    let weights = boltzmann_weights(sample, gamma)?;
    let risk = weights.iter().zip(sample.values()).map(|(s, z)| s * z).sum();
    Ok(ReweightedRisk { risk, weights })
}

/// Exponential tilt of the base distribution at temperature `gamma`.
struct Tilt {
    weights: Vec<f64>,
    /// `ln Σ p̂ᵢ exp((zᵢ − zmax)/γ)`.
    log_partition: f64,
    /// `KL(s‖p̂)`.
    kl: f64,
    /// `E_s[z]`.
    mean: f64,
}

fn tilt(sample: &LossSample, gamma: f64) -> Tilt {
    let zmax = sample.max();
    let z = sample.values();
    let p = sample.base_weights();
    let mut weights: Vec<f64> = z
        .iter()
        .zip(p)
        .map(|(&zi, &pi)| {
            if pi > 0.0 {
                pi * ((zi - zmax) / gamma).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let log_partition = total.ln();
    let mut shifted_mean = 0.0;
    let mut mean = 0.0;
    for (&s, &zi) in weights.iter().zip(z) {
        shifted_mean += s * (zi - zmax) / gamma;
        mean += s * zi;
    }
    Tilt {
        weights,
        log_partition,
        kl: (shifted_mean - log_partition).max(0.0),
        mean,
    }
}

/// KL robust risk via its one-dimensional dual in the temperature.
///
/// The dual `γε + γ·ln E_p̂[exp(z/γ)]` is convex in `γ` with derivative
/// `ε − KL(s_γ‖p̂)`, which is solved by bisection on `ln γ` over
/// `[1e−6·range, 1e6·range]`.
pub fn robust_risk_kl_dual(sample: &LossSample, epsilon: f64) -> Result<DualSolution> {
    check_radius(epsilon, true)?;
    let range = sample.range();
    if sample.len() == 1 || range == 0.0 {
        return Ok(DualSolution::degenerate(sample));
    }
    // The ball reaches the vertex on the maximum loss.
    if epsilon >= -sample.max_mass().ln() {
        return Ok(DualSolution::max_loss(sample));
    }
    let slope = |gamma: f64| epsilon - tilt(sample, gamma).kl;
    let mut lo = 1e-6 * range;
    let mut hi = 1e6 * range;
    if slope(lo) >= 0.0 {
        return Ok(DualSolution::max_loss(sample));
    }
    if slope(hi) <= 0.0 {
        return Ok(kl_solution(sample, hi));
    }
    while hi / lo - 1.0 > 1e-10 {
        let mid = (lo * hi).sqrt();
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(kl_solution(sample, (lo * hi).sqrt()))
}

fn kl_solution(sample: &LossSample, gamma: f64) -> DualSolution {
    let t = tilt(sample, gamma);
    DualSolution {
        robust_risk: t.mean,
        gamma: Some(gamma),
        worst_case_weights: t.weights,
        saturated: false,
    }
}

/// Value of the KL dual objective `γε + γ·ln E_p̂[exp(z/γ)]`.
pub fn kl_dual_objective(sample: &LossSample, epsilon: f64, gamma: f64) -> f64 {
    let t = tilt(sample, gamma);
    sample.max() + gamma * (epsilon + t.log_partition)
}

/// Outcome of the temperature fixed-point iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub gamma: f64,
    pub iterations: usize,
    /// `false` when the iteration did not settle and the bisection minimiser
    /// was returned instead.
    pub converged: bool,
}

const FIXED_POINT_MAX_ITERS: usize = 200;
const FIXED_POINT_TOL: f64 = 1e-10;

/// Temperature from the stationarity condition `γ = E_{s_γ}[z] / (ε + ln E_p̂[e^{z/γ}])`.
///
/// The map is applied to losses shifted so that their minimum is zero (the
/// fixed point is shift invariant and the shift keeps both sides positive).
/// Iterates are Aitken-accelerated and kept inside the bracket `(0, max/ε]`
/// learned from the sign of `T(γ) − γ`; when the bracket stalls the midpoint
/// is taken.
pub fn kl_gamma_fixed_point(sample: &LossSample, epsilon: f64, gamma0: f64) -> Result<FixedPoint> {
    check_radius(epsilon, true)?;
    if !(gamma0 > 0.0) || !gamma0.is_finite() {
        return Err(Error::contract(format!(
            "initial temperature must be finite and > 0, got {gamma0}"
        )));
    }
    if sample.range() == 0.0 {
        return Err(Error::contract("fixed point needs non-constant losses"));
    }
    if epsilon >= -sample.max_mass().ln() {
        return Err(Error::contract(
            "radius saturates the KL ball; the optimal temperature is zero",
        ));
    }
    let shifted = sample.shifted(-sample.min())?;
    let map = |gamma: f64| {
        let t = tilt(&shifted, gamma);
        // ln E[e^{w/γ}] = wmax/γ + ln Σ p e^{(w−wmax)/γ}
        let log_mgf = shifted.max() / gamma + t.log_partition;
        t.mean / (epsilon + log_mgf)
    };

    let mut lo = 0.0_f64;
    let mut hi = shifted.max() / epsilon;
    let mut gamma = gamma0.min(hi);
    for iteration in 1..=FIXED_POINT_MAX_ITERS {
        let width = hi - lo;
        let g1 = map(gamma);
        if g1 > gamma {
            lo = lo.max(gamma);
        } else {
            hi = hi.min(gamma);
        }
        let g2 = map(g1);
        if g2 > g1 {
            lo = lo.max(g1);
        } else {
            hi = hi.min(g1);
        }
        let denom = g2 - 2.0 * g1 + gamma;
        let aitken = if denom != 0.0 {
            gamma - (g1 - gamma) * (g1 - gamma) / denom
        } else {
            g2
        };
        let inside = |g: f64| g > lo && g < hi;
        let mut next = if inside(aitken) {
            aitken
        } else if inside(g2) {
            g2
        } else {
            0.5 * (lo + hi)
        };
        if (next - gamma).abs() <= FIXED_POINT_TOL * gamma || hi - lo <= FIXED_POINT_TOL * hi {
            return Ok(FixedPoint {
                gamma: next,
                iterations: iteration,
                converged: true,
            });
        }
        if hi - lo > 0.5 * width && !inside(aitken) {
            next = 0.5 * (lo + hi);
        }
        gamma = next;
    }
    let fallback = robust_risk_kl_dual(sample, epsilon)?;
    Ok(FixedPoint {
        gamma: fallback.gamma.unwrap_or(gamma),
        iterations: FIXED_POINT_MAX_ITERS,
        converged: false,
    })
}

/// Second-order approximation `√(V/(2ε))` of the optimal temperature.
///
/// `None` when the sample has zero variance.
pub fn gamma_star_approx(sample: &LossSample, epsilon: f64) -> Result<Option<f64>> {
    check_radius(epsilon, true)?;
    let variance = sample.variance();
    if variance == 0.0 {
        return Ok(None);
    }
    Ok(Some((variance / (2.0 * epsilon)).sqrt()))
}

// ── Primal oracle ───────────────────────────────────────────────────────

/// Brute-force primal robust risk `sup { E_q[z] : q ∈ Δ, D_φ(q‖p̂) ≤ ε }`.
///
/// Runs an equality-constrained log-barrier Newton method on the simplex and
/// cross-checks it against feasible points obtained by pushing random
/// Dirichlet directions out to the boundary of the ball. Only meant for
/// samples of at most [`ORACLE_MAX_LEN`] points.
pub fn dro_oracle(sample: &LossSample, kind: DivergenceKind, epsilon: f64) -> Result<f64> {
    check_radius(epsilon, false)?;
    if sample.len() > ORACLE_MAX_LEN {
        return Err(Error::contract(format!(
            "oracle handles at most {ORACLE_MAX_LEN} points, got {}",
            sample.len()
        )));
    }
    // Points without base mass cannot receive mass under either divergence.
    let (z, p): (Vec<f64>, Vec<f64>) = sample.supported().unzip();
    let mean: f64 = z.iter().zip(&p).map(|(a, b)| a * b).sum();
    if epsilon == 0.0 || z.len() == 1 {
        return Ok(mean);
    }
    let barrier = barrier_maximise(&z, &p, kind, epsilon);
    let sampled = dirichlet_search(&z, &p, kind, epsilon, 4096);
    Ok(barrier.max(sampled))
}

fn ball_value(kind: DivergenceKind, q: &[f64], p: &[f64]) -> f64 {
    match divergence(kind, q, p) {
        Ok(PhiValue::Finite(v)) => v,
        _ => f64::INFINITY,
    }
}

fn barrier_maximise(z: &[f64], p: &[f64], kind: DivergenceKind, epsilon: f64) -> f64 {
    let n = z.len();
    let scale = z.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut q = p.to_vec();
    let mut t = 1.0 / scale;

    // F(q) = −t·zᵀq − Σ ln qᵢ − ln(ε − D(q))
    let objective = |q: &[f64], t: f64| -> f64 {
        if q.iter().any(|&v| v <= 0.0) {
            return f64::INFINITY;
        }
        let d = ball_value(kind, q, p);
        if !(d < epsilon) {
            return f64::INFINITY;
        }
        let lin: f64 = z.iter().zip(q).map(|(a, b)| a * b).sum();
        -t * lin - q.iter().map(|v| v.ln()).sum::<f64>() - (epsilon - d).ln()
    };

    loop {
        for _ in 0..200 {
            let d = ball_value(kind, &q, p);
            let slack = epsilon - d;
            let (grad_d, hess_d): (Vec<f64>, Vec<f64>) = match kind {
                DivergenceKind::ChiSquare => (0..n).map(|i| (2.0 * (q[i] - p[i]) / p[i], 2.0 / p[i])).unzip(),
                DivergenceKind::KullbackLeibler => (0..n).map(|i| ((q[i] / p[i]).ln(), 1.0 / q[i])).unzip(),
            };
            let grad: Vec<f64> = (0..n).map(|i| -t * z[i] - 1.0 / q[i] + grad_d[i] / slack).collect();
            // H = diag(1/q² + D''/slack) + u·uᵀ with u = ∇D/slack.
            let diag: Vec<f64> = (0..n).map(|i| 1.0 / (q[i] * q[i]) + hess_d[i] / slack).collect();
            let u: Vec<f64> = grad_d.iter().map(|g| g / slack).collect();
            let solve = |v: &[f64]| -> Vec<f64> {
                let dv: Vec<f64> = v.iter().zip(&diag).map(|(a, b)| a / b).collect();
                let du: Vec<f64> = u.iter().zip(&diag).map(|(a, b)| a / b).collect();
                let num: f64 = u.iter().zip(&dv).map(|(a, b)| a * b).sum();
                let den: f64 = 1.0 + u.iter().zip(&du).map(|(a, b)| a * b).sum::<f64>();
                dv.iter().zip(&du).map(|(a, b)| a - b * num / den).collect()
            };
            let h_grad = solve(&grad);
            let h_ones = solve(&vec![1.0; n]);
            let nu = -h_grad.iter().sum::<f64>() / h_ones.iter().sum::<f64>();
            let step: Vec<f64> = (0..n).map(|i| -(h_grad[i] + nu * h_ones[i])).collect();
            let decrement: f64 = -grad.iter().zip(&step).map(|(a, b)| a * b).sum::<f64>();
            if decrement / 2.0 <= 1e-14 {
                break;
            }
            let f0 = objective(&q, t);
            let mut alpha = 1.0;
            let mut moved = false;
            for _ in 0..80 {
                let trial: Vec<f64> = q.iter().zip(&step).map(|(a, b)| a + alpha * b).collect();
                if objective(&trial, t) <= f0 - 0.25 * alpha * decrement {
                    q = trial;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if (n as f64 + 1.0) / t < 1e-11 * scale {
            break;
        }
        t *= 20.0;
    }
    z.iter().zip(&q).map(|(a, b)| a * b).sum()
}

fn dirichlet_search(z: &[f64], p: &[f64], kind: DivergenceKind, epsilon: f64, draws: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0d40);
    let n = z.len();
    let mean: f64 = z.iter().zip(p).map(|(a, b)| a * b).sum();
    let mut best = mean;
    let mut point = vec![0.0; n];
    let mut vertex = vec![0.0; n];
    for _ in 0..draws {
        let mut total = 0.0;
        for v in vertex.iter_mut() {
            let u: f64 = rng.random::<f64>();
            *v = -(1.0 - u).ln();
            total += *v;
        }
        for v in vertex.iter_mut() {
            *v /= total;
        }
        // D(p + τ(v − p)) is convex in τ and zero at τ = 0.
        let at = |tau: f64, point: &mut [f64]| {
            for i in 0..n {
                point[i] = p[i] + tau * (vertex[i] - p[i]);
            }
        };
        at(1.0, &mut point);
        let tau = if ball_value(kind, &point, p) <= epsilon {
            1.0
        } else {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..48 {
                let mid = 0.5 * (lo + hi);
                at(mid, &mut point);
                if ball_value(kind, &point, p) <= epsilon {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        at(tau, &mut point);
        let value: f64 = z.iter().zip(&point).map(|(a, b)| a * b).sum();
        best = best.max(value);
    }
    best
}

// ── χ² quantiles ────────────────────────────────────────────────────────

/// Standard normal quantile: Acklam's rational approximation refined by one
/// Halley step on the complementary error function.
pub fn normal_quantile(prob: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const LOW: f64 = 0.02425;

    if prob <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if prob >= 1.0 {
        return f64::INFINITY;
    }
    let x = if prob < LOW {
        let q = (-2.0 * prob.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if prob <= 1.0 - LOW {
        let q = prob - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - prob).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let err = 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2) - prob;
    let u = err * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// `(1−δ)` quantile of the χ² distribution with one degree of freedom.
pub fn chi2_quantile_1dof(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::contract(format!("delta must lie in (0, 1), got {delta}")));
    }
    let x = normal_quantile(1.0 - 0.5 * delta);
    Ok(x * x)
}

/// Radius `χ²_{1,1−δ}/n` giving asymptotic `1−δ` coverage of the true risk.
pub fn chi2_radius(delta: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("sample size must be positive"));
    }
    Ok(chi2_quantile_1dof(delta)? / n as f64)
}
