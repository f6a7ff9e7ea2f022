//! Limited-memory BFGS with a strong Wolfe line search.
//!
//! The minimiser is deterministic: identical inputs produce identical
//! iterates. It tracks the best point seen, so the returned parameters never
//! score worse than the starting point.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::objectives::{BanditLog, CrmObjective, ObjectiveOptions};
use crate::policy::PolicyParams;

/// Curvature pairs with `sᵀy ≤ CURVATURE_EPS·‖s‖‖y‖` are not stored.
const CURVATURE_EPS: f64 = 1e-10;

// ── Configuration and trace ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    /// Number of curvature pairs kept.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once the gradient infinity-norm falls to this value.
    pub grad_tol: f64,
    /// Stop once an accepted step decreases f by less than this relative amount.
    pub f_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search_steps: usize,
    /// Infinity-norm box enforced by projection after each step.
    pub box_bound: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-6,
            f_tol: 1e-9,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_steps: 40,
            box_bound: Some(1e3),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::contract(format!(
                "Wolfe constants need 0 < c1 < c2 < 1, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if !(self.grad_tol > 0.0 && self.f_tol > 0.0) {
            return Err(Error::contract("tolerances must be positive"));
        }
        if self.memory == 0 || self.max_line_search_steps == 0 {
            return Err(Error::contract("memory and line-search budget must be positive"));
        }
        if let Some(b) = self.box_bound {
            if !(b > 0.0) {
                return Err(Error::contract(format!("box bound must be > 0, got {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailed,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::GradientTolerance => "grad_tol",
            Termination::FunctionTolerance => "f_tol",
            Termination::MaxIterations => "max_iters",
            Termination::LineSearchFailed => "line_search_failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    /// Accepted step length (0 for the starting point).
    pub step: f64,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimTrace {
    /// One record per accepted iterate, starting with the initial point.
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    pub evaluations: usize,
}

impl OptimTrace {
    pub fn final_value(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.value)
    }

    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }
}

// ── Objective interface ─────────────────────────────────────────────────

/// A smooth function with gradient. `evaluate` writes ∇f into `grad`.
pub trait Objective {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Temperature used by the most recent evaluation, if any.
    fn temperature(&self) -> Option<f64> {
        None
    }
}

impl<F> Objective for F
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        Ok(self(x, grad))
    }
}

/// Counterfactual objective over a fixed log, viewed as a function of θ.
pub struct CrmProblem<'a> {
    objective: CrmObjective,
    log: &'a BanditLog,
    options: ObjectiveOptions,
    last_gamma: Option<f64>,
}

impl<'a> CrmProblem<'a> {
    pub fn new(objective: CrmObjective, log: &'a BanditLog, options: ObjectiveOptions) -> Self {
        Self {
            objective,
            log,
            options,
            last_gamma: None,
        }
    }
}

impl Objective for CrmProblem<'_> {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let params = PolicyParams::from_weights(self.log.labels(), self.log.features(), x.to_vec())?;
        let report = self.objective.evaluate(&params, self.log, &self.options)?;
        grad.copy_from_slice(&report.gradient);
        self.last_gamma = report.gamma_used;
        Ok(report.risk)
    }

    fn temperature(&self) -> Option<f64> {
        self.last_gamma
    }
}

// ── Helpers ─────────────────────────────────────────────────────────────

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Evaluation with NaN detection.
struct Counted<'o, O: Objective + ?Sized> {
    inner: &'o mut O,
    evaluations: usize,
    iteration: usize,
}

impl<O: Objective + ?Sized> Counted<'_, O> {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.evaluations += 1;
        let f = self.inner.evaluate(x, grad)?;
        if f.is_nan() || grad.iter().any(|g| g.is_nan()) {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                value: f,
            });
        }
        Ok(f)
    }
}

struct Memory {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl Memory {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if !(sy > CURVATURE_EPS * norm(&s) * norm(&y)) {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion: returns `−H·g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let h0 = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= h0);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

// ── Strong Wolfe line search ────────────────────────────────────────────

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    step: f64,
}

/// Minimiser of the cubic through `(a, fa, da)` and `(b, fb, db)`, kept well
/// inside the interval; falls back to bisection.
fn interpolate(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (hi - lo);
    if disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
        if t.is_finite() && t > lo + margin && t < hi - margin {
            return t;
        }
    }
    0.5 * (a + b)
}

fn line_search<O: Objective + ?Sized>(
    eval: &mut Counted<'_, O>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    initial: f64,
    cfg: &OptimConfig,
) -> Result<Option<Point>> {
    let dphi0 = dot(g0, d);
    // Longest step that stays inside the box.
    let a_max = cfg.box_bound.map_or(f64::INFINITY, |b| {
        x.iter().zip(d).fold(f64::INFINITY, |m, (&xi, &di)| {
            if di > 0.0 {
                m.min((b - xi) / di)
            } else if di < 0.0 {
                m.min((-b - xi) / di)
            } else {
                m
            }
        })
    });
    let mut grad = vec![0.0; x.len()];
    let trial = |eval: &mut Counted<'_, O>, a: f64, grad: &mut Vec<f64>| -> Result<(Vec<f64>, f64, f64)> {
        let xa: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + a * di).collect();
        let fa = eval.eval(&xa, grad)?;
        Ok((xa, fa, dot(grad, d)))
    };

    let (mut a_prev, mut f_prev, mut d_prev) = (0.0, f0, dphi0);
    let mut a = initial.min(a_max);
    let mut steps = 0;
    // Bracketing phase.
    let (mut lo, mut hi) = loop {
        if steps == cfg.max_line_search_steps {
            return Ok(None);
        }
        steps += 1;
        let (xa, fa, da) = trial(eval, a, &mut grad)?;
        if !fa.is_finite() || !all_finite(&grad) {
            // Overflow: retreat towards the last good step.
            a = 0.5 * (a_prev + a);
            continue;
        }
        if fa > f0 + cfg.c1 * a * dphi0 || (steps > 1 && fa >= f_prev) {
            break ((a_prev, f_prev, d_prev), (a, fa, da));
        }
        if da.abs() <= -cfg.c2 * dphi0 {
            return Ok(Some(Point {
                x: xa,
                f: fa,
                g: grad,
                step: a,
            }));
        }
        if da >= 0.0 {
            break ((a, fa, da), (a_prev, f_prev, d_prev));
        }
        if a >= a_max {
            return Ok(Some(Point {
                x: xa,
                f: fa,
                g: grad,
                step: a,
            }));
        }
        a_prev = a;
        f_prev = fa;
        d_prev = da;
        a = (2.0 * a).min(a_max);
    };
    // Zoom phase: `lo` always satisfies sufficient decrease with the lowest f.
    while steps < cfg.max_line_search_steps {
        steps += 1;
        let a = interpolate(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
        if (hi.0 - lo.0).abs() <= f64::EPSILON * lo.0.abs().max(1e-300) {
            break;
        }
        let (xa, fa, da) = trial(eval, a, &mut grad)?;
        if !fa.is_finite() || fa > f0 + cfg.c1 * a * dphi0 || fa >= lo.1 {
            hi = (a, fa, da);
            continue;
        }
        if da.abs() <= -cfg.c2 * dphi0 {
            return Ok(Some(Point {
                x: xa,
                f: fa,
                g: grad,
                step: a,
            }));
        }
        if da * (hi.0 - lo.0) >= 0.0 {
            hi = lo;
        }
        lo = (a, fa, da);
    }
    Ok(None)
}

// ── Minimiser ───────────────────────────────────────────────────────────

/// Minimises `objective` from `x0`.
pub fn minimize<O: Objective + ?Sized>(
    objective: &mut O,
    x0: &[f64],
    cfg: &OptimConfig,
) -> Result<(Vec<f64>, OptimTrace)> {
    cfg.validate()?;
    if !all_finite(x0) {
        return Err(Error::contract("starting point must be finite"));
    }
    let project = |x: &mut [f64]| {
        if let Some(b) = cfg.box_bound {
            let mut moved = false;
            for v in x.iter_mut() {
                let c = v.clamp(-b, b);
                moved |= c != *v;
                *v = c;
            }
            moved
        } else {
            false
        }
    };

    let mut eval = Counted {
        inner: objective,
        evaluations: 0,
        iteration: 0,
    };
    let mut x = x0.to_vec();
    project(&mut x);
    let mut g = vec![0.0; x.len()];
    let mut f = eval.eval(&x, &mut g)?;
    if !f.is_finite() {
        return Err(Error::NonFinite { iteration: 0, value: f });
    }
    let mut records = vec![IterationRecord {
        iteration: 0,
        value: f,
        grad_norm: inf_norm(&g),
        step: 0.0,
        gamma: eval.inner.temperature(),
    }];
    let mut best = (x.clone(), f);
    let mut memory = Memory {
        pairs: VecDeque::with_capacity(cfg.memory),
        capacity: cfg.memory,
    };

    let mut termination = Termination::MaxIterations;
    for k in 1..=cfg.max_iters {
        if inf_norm(&g) <= cfg.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        eval.iteration = k;
        let steepest = |g: &[f64]| g.iter().map(|v| -v).collect::<Vec<f64>>();
        let mut d = memory.direction(&g);
        if !(dot(&g, &d) < 0.0) || !all_finite(&d) {
            memory.pairs.clear();
            d = steepest(&g);
        }
        if let Some(b) = cfg.box_bound {
            // Coordinates pinned to the box cannot move further out.
            let mut pinned = false;
            for (di, xi) in d.iter_mut().zip(&x) {
                if (*xi >= b && *di > 0.0) || (*xi <= -b && *di < 0.0) {
                    *di = 0.0;
                    pinned = true;
                }
            }
            if pinned && !(dot(&g, &d) < 0.0) {
                termination = Termination::FunctionTolerance;
                break;
            }
        }
        let first_step = |memory: &Memory, d: &[f64]| {
            if memory.pairs.is_empty() {
                (1.0 / norm(d)).min(1.0)
            } else {
                1.0
            }
        };
        let mut point = line_search(&mut eval, &x, f, &g, &d, first_step(&memory, &d), cfg)?;
        if point.is_none() && !memory.pairs.is_empty() {
            memory.pairs.clear();
            d = steepest(&g);
            point = line_search(&mut eval, &x, f, &g, &d, first_step(&memory, &d), cfg)?;
        }
        let Some(mut p) = point else {
            termination = Termination::LineSearchFailed;
            break;
        };
        if project(&mut p.x) {
            p.f = eval.eval(&p.x, &mut p.g)?;
            memory.pairs.clear();
        }
        let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        memory.push(s, y);
        let decrease = f - p.f;
        let scale = f.abs().max(p.f.abs()).max(1.0);
        x = p.x;
        f = p.f;
        g = p.g;
        records.push(IterationRecord {
            iteration: k,
            value: f,
            grad_norm: inf_norm(&g),
            step: p.step,
            gamma: eval.inner.temperature(),
        });
        if f < best.1 {
            best = (x.clone(), f);
        }
        if decrease.abs() <= cfg.f_tol * scale {
            termination = if inf_norm(&g) <= cfg.grad_tol {
                Termination::GradientTolerance
            } else {
                Termination::FunctionTolerance
            };
            break;
        }
    }
    let trace = OptimTrace {
        records,
        termination,
        evaluations: eval.evaluations,
    };
    Ok((best.0, trace))
}

/// Minimises over policy parameters, keeping the shape of `theta0`.
pub fn minimize_params<O: Objective + ?Sized>(
    objective: &mut O,
    theta0: &PolicyParams,
    cfg: &OptimConfig,
) -> Result<(PolicyParams, OptimTrace)> {
    let (x, trace) = minimize(objective, theta0.as_slice(), cfg)?;
    Ok((
        PolicyParams::from_weights(theta0.labels(), theta0.features(), x)?,
        trace,
    ))
}

/// Fits `objective` on `log` starting from `theta0`.
pub fn train_policy(
    objective: CrmObjective,
    log: &BanditLog,
    options: ObjectiveOptions,
    theta0: &PolicyParams,
    cfg: &OptimConfig,
) -> Result<(PolicyParams, OptimTrace)> {
    let mut problem = CrmProblem::new(objective, log, options);
    minimize_params(&mut problem, theta0, cfg)
}
