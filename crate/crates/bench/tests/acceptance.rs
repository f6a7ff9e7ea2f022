//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness: every check prints `PASS` or `FAIL`
//! with its measurements, and the process exits nonzero if any check fails.
//! Checks on the Scene and Yeast benchmarks read svmlight files from
//! `DRO_CRM_DATA_DIR` (default `<workspace>/data`): `scene_train.svm`,
//! `scene_test.svm`, `yeast_train.svm`, `yeast_test.svm`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use dro_crm::divergence::{
    dro_oracle, gamma_star_approx, kl_gamma_fixed_point, robust_risk_chi2, robust_risk_kl_dual, DivergenceKind,
    LossSample,
};
use dro_crm::objectives::{
    akl_crm_with, cips_risk, kl_crm_objective, kl_crm_with, poem_objective, sample_losses, BanditLog, BanditRecord,
    CostScale, GammaRule, ObjectiveOptions,
};
use dro_crm::policy::{sample_action, FeatureVector, PolicyParams};
use dro_crm_bench::config::ExperimentConfig;
use dro_crm_bench::experiment::{load_data, replay_sweep, run_experiment, Algorithm, LOGGER_ROW};
use dro_crm_bench::report::{summarize, sweep_aggregates};
use dro_crm_bench::stats::{paired_t_test_one_tailed, student_t_sf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("chi-square closed form", chi2_closed_form),
        ("KL dual and fixed point", kl_dual),
        ("temperature approximation", gamma_approximation),
        ("KL decay to the chi-square expansion", kl_decay),
        ("objective gradients", gradient_suite),
        ("objective equivalences", objective_equivalences),
        ("Scene and Yeast benchmark", desk_benchmark),
        ("Yeast replay sweep", yeast_sweep),
        ("paired t-test tail", t_test_tail),
        ("single-thread determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        if !outcome.pass {
            failures += 1;
        }
        println!(
            "criterion {:>2} [{verdict}] {name}: {} ({:.1}s)",
            i + 1,
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}

// ── Divergence checks ───────────────────────────────────────────────────

/// A uniform sample of 2 to 8 losses and a radius inside the region where
/// the χ² worst case keeps every point in the support.
fn interior_instance(rng: &mut ChaCha8Rng) -> (LossSample, f64) {
    let n = rng.random_range(2..=8);
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sample = LossSample::uniform(z).unwrap();
    let gap = sample.mean() - sample.min();
    let eps_max = sample.variance() / (gap * gap);
    let eps = rng.random_range(0.05..1.0) * eps_max;
    (sample, eps)
}

fn chi2_closed_form() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_closed, mut worst_oracle) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let (sample, eps) = interior_instance(&mut rng);
        let risk = robust_risk_chi2(&sample, eps).unwrap().robust_risk;
        let closed = sample.mean() + (eps * sample.variance()).sqrt();
        let oracle = dro_oracle(&sample, DivergenceKind::ChiSquare, eps).unwrap();
        worst_closed = worst_closed.max((risk - closed).abs());
        worst_oracle = worst_oracle.max((risk - oracle).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst_closed <= 1e-12 && worst_oracle <= 1e-4 && secs < 10.0,
        format!(
            "500 instances, max |closed form gap| {worst_closed:.2e}, max |oracle gap| {worst_oracle:.2e}, {secs:.2}s"
        ),
    )
}

fn kl_dual() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_oracle, mut worst_gamma) = (0.0f64, 0.0f64);
    let mut saturated = 0;
    for _ in 0..500 {
        let (sample, eps) = interior_instance(&mut rng);
        let dual = robust_risk_kl_dual(&sample, eps).unwrap();
        let oracle = dro_oracle(&sample, DivergenceKind::KullbackLeibler, eps).unwrap();
        worst_oracle = worst_oracle.max((dual.robust_risk - oracle).abs());
        match dual.gamma {
            Some(gamma) => {
                let fp = kl_gamma_fixed_point(&sample, eps, 1.0).unwrap();
                worst_gamma = worst_gamma.max((fp.gamma - gamma).abs() / gamma);
            }
            None => saturated += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst_oracle <= 1e-4 && worst_gamma <= 1e-5 && secs < 30.0,
        format!(
            "500 instances ({saturated} saturated, no temperature), max |oracle gap| {worst_oracle:.2e}, \
             max fixed-point vs bisection temperature rel. gap {worst_gamma:.2e}, {secs:.2}s"
        ),
    )
}

fn gamma_approximation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut good = 0;
    let mut errors = Vec::with_capacity(200);
    for _ in 0..200 {
        let n = rng.random_range(20..=200);
        let z: Vec<f64> = (0..n).map(|_| -rng.random_range(0.0..1.0)).collect();
        let sample = LossSample::uniform(z).unwrap();
        let eps = 10f64.powf(rng.random_range(-4.0..-2.0));
        let exact = robust_risk_kl_dual(&sample, eps).unwrap().gamma.unwrap();
        let approx = gamma_star_approx(&sample, eps).unwrap().unwrap();
        let err = (approx - exact).abs() / exact;
        errors.push(err);
        if err <= 0.1 {
            good += 1;
        }
    }
    errors.sort_by(f64::total_cmp);
    Outcome::new(
        good >= 180,
        format!(
            "{good}/200 within 10% (n in 20..200, eps in [1e-4, 1e-2]), median rel. error {:.2e}, max {:.2e}",
            errors[100], errors[199]
        ),
    )
}

fn decay_medians(scale: f64) -> Vec<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    [100usize, 1000, 10000]
        .into_iter()
        .map(|n| {
            let eps = 1.0 / n as f64;
            let mut stats: Vec<f64> = (0..50)
                .map(|_| {
                    let z: Vec<f64> = (0..n).map(|_| -rng.random_range(0.0..1.0)).collect();
                    let sample = LossSample::uniform(z).unwrap();
                    let kl = robust_risk_kl_dual(&sample, scale * eps).unwrap().robust_risk;
                    (n as f64).sqrt() * (kl - sample.mean() - (eps * sample.variance()).sqrt()).abs()
                })
                .collect();
            stats.sort_by(f64::total_cmp);
            (n, 0.5 * (stats[24] + stats[25]))
        })
        .collect()
}

fn kl_decay() -> Outcome {
    let medians = decay_medians(1.0);
    let decreasing = medians.windows(2).all(|w| w[1].1 < w[0].1);
    let halved = decay_medians(0.5);
    let fmt = |m: &[(usize, f64)]| {
        m.iter()
            .map(|(n, v)| format!("n={n}: {v:.3e}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Outcome::new(
        decreasing,
        format!(
            "medians of sqrt(n)|R_KL - mean - sqrt(eps V)| at eps=1/n: {}; with the KL radius halved: {}",
            fmt(&medians),
            fmt(&halved)
        ),
    )
}

// ── Objective checks ────────────────────────────────────────────────────

/// A log drawn from a random logger with costs in `[-1, -0.05]`, plus a
/// random evaluation policy.
fn random_log(rng: &mut ChaCha8Rng, n: usize, q: usize, d: usize, clip_m: f64) -> (PolicyParams, BanditLog) {
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
    let log = BanditLog::new(records, clip_m, CostScale::IDENTITY).unwrap();
    (rand_params(rng), log)
}

/// Picks a clip constant in the widest relative gap between sorted ratios,
/// so no ratio sits near the kink.
fn clip_away_from_kinks(params: &PolicyParams, log: BanditLog) -> BanditLog {
    let mut ratios = sample_losses(params, &log).unwrap().ratios;
    ratios.sort_by(f64::total_cmp);
    let best = ratios
        .windows(2)
        .max_by(|a, b| (a[1] / a[0]).total_cmp(&(b[1] / b[0])))
        .map(|w| (w[0] * w[1]).sqrt());
    match best {
        Some(m) if m >= 1.0 => log.with_clip(m).unwrap(),
        _ => log,
    }
}

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
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frozen = ObjectiveOptions::default();
    let full = ObjectiveOptions {
        differentiate_weights: true,
        ..Default::default()
    };
    let mut worst = [0.0f64; 6];
    let mut clipped_instances = 0;
    for i in 0..100 {
        let (n, q, d) = (
            rng.random_range(5..=30),
            rng.random_range(1..=4),
            rng.random_range(1..=5),
        );
        let (params, log) = random_log(&mut rng, n, q, d, 1e18);
        let log = if i % 2 == 0 {
            clip_away_from_kinks(&params, log)
        } else {
            log
        };
        let losses = |p: &PolicyParams| sample_losses(p, &log).unwrap().losses;
        if sample_losses(&params, &log).unwrap().clipped.iter().any(|&c| c) {
            clipped_instances += 1;
        }
        let lambda = rng.random_range(0.0..2.0);
        let gamma = 10f64.powf(rng.random_range(-1.0..1.0));
        let eps = 10f64.powf(rng.random_range(-3.0..0.0));

        let cips = cips_risk(&params, &log).unwrap();
        worst[0] = worst[0].max(rel_err(
            &cips.gradient,
            &numeric_gradient(&params, |p| cips_risk(p, &log).unwrap().risk),
        ));
        let poem = poem_objective(&params, &log, lambda).unwrap();
        worst[1] = worst[1].max(rel_err(
            &poem.gradient,
            &numeric_gradient(&params, |p| poem_objective(p, &log, lambda).unwrap().risk),
        ));

        let kl = kl_crm_with(&params, &log, gamma, &frozen).unwrap();
        let s = kl.weights.clone();
        worst[2] = worst[2].max(rel_err(
            &kl.gradient,
            &numeric_gradient(&params, |p| s.iter().zip(losses(p)).map(|(s, z)| s * z).sum()),
        ));
        let kl_full = kl_crm_with(&params, &log, gamma, &full).unwrap();
        worst[3] = worst[3].max(rel_err(
            &kl_full.gradient,
            &numeric_gradient(&params, |p| kl_crm_with(p, &log, gamma, &full).unwrap().risk),
        ));

        let akl = akl_crm_with(&params, &log, eps, &frozen).unwrap();
        let s = akl.weights.clone();
        worst[4] = worst[4].max(rel_err(
            &akl.gradient,
            &numeric_gradient(&params, |p| s.iter().zip(losses(p)).map(|(s, z)| s * z).sum()),
        ));
        let akl_full = akl_crm_with(&params, &log, eps, &full).unwrap();
        worst[5] = worst[5].max(rel_err(
            &akl_full.gradient,
            &numeric_gradient(&params, |p| akl_crm_with(p, &log, eps, &full).unwrap().risk),
        ));
    }
    let names = [
        "CIPS",
        "POEM",
        "KL-CRM frozen",
        "KL-CRM full",
        "aKL-CRM frozen",
        "aKL-CRM full",
    ];
    Outcome::new(
        worst.iter().all(|&e| e <= 1e-5),
        format!(
            "100 instances ({clipped_instances} with clipped records), max rel. error {}",
            names
                .iter()
                .zip(worst)
                .map(|(n, e)| format!("{n} {e:.1e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn objective_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_poem, mut worst_kl, mut worst_pessimism) = (0.0f64, 0.0f64, f64::INFINITY);
    let mut shrunk = 0;
    for _ in 0..100 {
        let (n, q, d) = (
            rng.random_range(10..=50),
            rng.random_range(1..=4),
            rng.random_range(1..=5),
        );
        let clip = 10f64.powf(rng.random_range(0.3..3.0));
        let (params, log) = random_log(&mut rng, n, q, d, clip);

        // POEM only matches the χ² ball while the worst case keeps every
        // record; shrink λ into that region.
        let losses = LossSample::uniform(sample_losses(&params, &log).unwrap().losses).unwrap();
        let gap = losses.mean() - losses.min();
        let lambda_max = (n as f64 * losses.variance()).sqrt() / gap;
        let mut lambda = rng.random_range(0.0..2.0);
        if lambda >= lambda_max {
            lambda = rng.random_range(0.0..1.0) * lambda_max;
            shrunk += 1;
        }
        let poem = poem_objective(&params, &log, lambda).unwrap().risk;
        let chi2 = robust_risk_chi2(&losses, lambda * lambda / n as f64)
            .unwrap()
            .robust_risk;
        worst_poem = worst_poem.max((poem - chi2).abs());

        let cips = cips_risk(&params, &log).unwrap().risk;
        worst_kl = worst_kl.max((kl_crm_objective(&params, &log, 1e9).unwrap().risk - cips).abs());

        for rule in [GammaRule::SumOfSquares, GammaRule::Variance] {
            let options = ObjectiveOptions {
                gamma_rule: rule,
                ..Default::default()
            };
            let eps = 10f64.powf(rng.random_range(-4.0..0.0));
            let akl = akl_crm_with(&params, &log, eps, &options).unwrap().risk;
            worst_pessimism = worst_pessimism.min(akl - cips);
        }
    }
    Outcome::new(
        worst_poem <= 1e-10 && worst_kl <= 1e-8 && worst_pessimism >= 0.0,
        format!(
            "100 logs: max |POEM - chi2| {worst_poem:.1e} ({shrunk} lambdas shrunk into the interior), \
             max |KL-CRM(1e9) - CIPS| {worst_kl:.1e}, min aKL - CIPS {worst_pessimism:.2e}"
        ),
    )
}

// ── Benchmarks ──────────────────────────────────────────────────────────

fn data_dir() -> PathBuf {
    std::env::var_os("DRO_CRM_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn benchmark_config(name: &str) -> Result<ExperimentConfig, String> {
    let dir = data_dir();
    let train = dir.join(format!("{name}_train.svm"));
    let test = dir.join(format!("{name}_test.svm"));
    for p in [&train, &test] {
        if !p.is_file() {
            return Err(format!("{} not found; set DRO_CRM_DATA_DIR", p.display()));
        }
    }
    Ok(ExperimentConfig {
        dataset_name: name.into(),
        train_path: Some(train),
        test_path: Some(test),
        ..Default::default()
    })
}

/// Expected Hamming loss reported for each learned method on Scene and Yeast.
const REFERENCE: [(&str, f64, f64); 4] = [
    ("cips", 1.163, 4.658),
    ("poem", 1.157, 4.535),
    ("klcrm", 1.146, 4.604),
    ("aklcrm", 1.128, 4.553),
];

fn desk_benchmark() -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for (k, name) in ["scene", "yeast"].into_iter().enumerate() {
        let cfg = match benchmark_config(name) {
            Ok(cfg) => cfg,
            Err(e) => {
                pass = false;
                details.push(format!("{name}: {e}"));
                continue;
            }
        };
        let summary = match load_data(&cfg).and_then(|data| run_experiment(&cfg, &data)) {
            Ok(out) => summarize(&out.rows),
            Err(e) => {
                pass = false;
                details.push(format!("{name}: {e}"));
                continue;
            }
        };
        let mean = |label: &str| summary.iter().find(|s| s.algorithm == label).map(|s| s.expected_mean);
        let logger = mean(LOGGER_ROW).unwrap_or(f64::NAN);
        let mut parts = vec![format!("logger {logger:.3}")];
        for (alg, scene_ref, yeast_ref) in REFERENCE {
            let reference = if k == 0 { scene_ref } else { yeast_ref };
            let m = mean(alg).unwrap_or(f64::NAN);
            let beats = m < logger;
            let in_band = (m - reference).abs() <= 0.15 * reference;
            pass &= beats && in_band;
            parts.push(format!(
                "{alg} {m:.3} (ref {reference}, {}{})",
                if beats { "beats logger" } else { "does not beat logger" },
                if in_band { "" } else { ", outside 15% band" }
            ));
        }
        details.push(format!("{name}: {}", parts.join(", ")));
    }
    Outcome::new(pass, details.join("; "))
}

fn yeast_sweep() -> Outcome {
    let mut cfg = match benchmark_config("yeast") {
        Ok(cfg) => cfg,
        Err(e) => return Outcome::new(false, format!("yeast: {e}")),
    };
    cfg.sweep_seeds = (0..10).collect();
    let result = load_data(&cfg).and_then(|data| replay_sweep(&cfg, &data, &[1, 4, 16, 64]));
    let rows = match result {
        Ok((rows, _)) => rows,
        Err(e) => return Outcome::new(false, format!("yeast: {e}")),
    };
    let agg = sweep_aggregates(&rows);
    let mean = |alg: Algorithm, delta: usize| {
        agg.get(&(alg.name().to_string(), delta))
            .map_or(f64::NAN, |a| a.expected_mean)
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for alg in Algorithm::ALL {
        let (m1, m64) = (mean(alg, 1), mean(alg, 64));
        pass &= m64 <= m1;
        parts.push(format!("{} {m1:.3} at 1 vs {m64:.3} at 64", alg.name()));
    }
    let poem1 = mean(Algorithm::Poem, 1);
    let kl_beats_poem = mean(Algorithm::KlCrm, 1) < poem1 && mean(Algorithm::AklCrm, 1) < poem1;
    parts.push(format!(
        "KL variants beat POEM at a single replay: {} (reported, not gated)",
        if kl_beats_poem { "yes" } else { "no" }
    ));
    Outcome::new(pass, parts.join(", "))
}

// ── Statistics ──────────────────────────────────────────────────────────

/// `P(T > t)` by composite Simpson integration of the Student density.
fn tail_by_quadrature(t: f64, dof: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let ln_c = ln_gamma((dof + 1.0) / 2.0) - ln_gamma(dof / 2.0) - 0.5 * (dof * std::f64::consts::PI).ln();
    let pdf = |x: f64| (ln_c - (dof + 1.0) / 2.0 * (1.0 + x * x / dof).ln()).exp();
    let (a, b, n) = (t, t + 400.0, 400_000);
    let h = (b - a) / n as f64;
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn t_test_tail() -> Outcome {
    // Twenty paired differences with sample sd 1 and mean 1.729/√20, so t = 1.729.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let raw: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let m = raw.iter().sum::<f64>() / 20.0;
    let sd = (raw.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 19.0).sqrt();
    let target_mean = 1.729 / 20f64.sqrt();
    let a: Vec<f64> = raw.iter().map(|v| (v - m) / sd + target_mean).collect();
    let test = paired_t_test_one_tailed(&a, &[0.0; 20]).unwrap();
    let oracle = tail_by_quadrature(1.729, 19.0);
    let direct = student_t_sf(1.729, 19.0);
    Outcome::new(
        (test.t - 1.729).abs() < 1e-9 && (test.p_value - oracle).abs() <= 1e-3 && (test.p_value - 0.05).abs() <= 1e-3,
        format!(
            "t = {:.6}, p = {:.6}, quadrature oracle {oracle:.6}, |p - oracle| = {:.1e}, tail function {direct:.6}",
            test.t,
            test.p_value,
            (test.p_value - oracle).abs()
        ),
    )
}

// ── Determinism ─────────────────────────────────────────────────────────

fn bench(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .current_dir(dir)
        .env("DRO_CRM_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "bench {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn determinism() -> Outcome {
    let run = || -> Result<(Vec<u8>, Vec<u8>), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = dir.path();
        bench(&["synth", "--out", "data", "--examples", "300", "--seed", "3"], root)?;
        std::fs::write(
            root.join("exp.cfg"),
            "dataset.name = synth\ndataset.train = data/train.svm\ndataset.test = data/test.svm\n\
             seeds = 0..3\noptim.max_iters = 60\n",
        )
        .map_err(|e| e.to_string())?;
        bench(&["run", "--config", "exp.cfg", "--output", "first"], root)?;
        bench(&["run", "--config", "exp.cfg", "--output", "second"], root)?;
        let read = |p: &str| std::fs::read(root.join(p).join("results.csv")).map_err(|e| e.to_string());
        Ok((read("first")?, read("second")?))
    };
    match run() {
        Ok((a, b)) => Outcome::new(
            a == b && !a.is_empty(),
            format!(
                "two runs with DRO_CRM_THREADS=1: results.csv {} ({} bytes)",
                if a == b { "byte-identical" } else { "differs" },
                a.len()
            ),
        ),
        Err(e) => Outcome::new(false, e),
    }
}
