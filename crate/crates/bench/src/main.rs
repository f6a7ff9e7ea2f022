//! `bench`: command-line front end of the benchmark harness.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dro_crm::sim::{
    evaluate_policy, generate_bandit_log, stream_seed, synthetic_multilabel, train_logger, write_bandit_log, EvalMode,
    LogMetadata, SupervisedDataset, SyntheticSpec,
};
use dro_crm::svmlight::{load_multilabel_svmlight, write_multilabel, LoadOptions};
use dro_crm_bench::config::{parse_deltas, ExperimentConfig};
use dro_crm_bench::experiment::{holdout, load_config_and_data, replay_sweep, run_experiment, worker_pool, Data};
use dro_crm_bench::params::SavedPolicy;
use dro_crm_bench::report::{emit_results, emit_sweep, fmt6};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "bench",
    version,
    about = "Counterfactual risk minimization benchmarks on logged bandit feedback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides the `output` key.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs every configured algorithm and baseline over all seeds.
    Run(ConfigArgs),
    /// Runs every algorithm at several replay counts.
    Sweep {
        #[command(flatten)]
        common: ConfigArgs,
        /// Comma-separated replay counts; defaults to `sweep.deltas`.
        #[arg(long)]
        deltas: Option<String>,
    },
    /// Turns a supervised multilabel file into a logged bandit dataset.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replay count.
        #[arg(long, default_value_t = 4)]
        delta: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of examples used to fit the logger.
        #[arg(long, default_value_t = 0.05)]
        logger_frac: f64,
        /// Temperature applied to the fitted logger weights.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-4)]
        l2: f64,
        /// Append a constant feature.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        bias: bool,
        /// Label id convention: auto, 0 or 1.
        #[arg(long, default_value = "auto")]
        label_base: String,
    },
    /// Scores saved policy weights on a labelled test file.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Both)]
        mode: Mode,
        /// Label id convention: auto, 0 or 1.
        #[arg(long, default_value = "auto")]
        label_base: String,
    },
    /// Writes a synthetic multilabel train/test pair in svmlight format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        examples: usize,
        #[arg(long, default_value_t = 4)]
        labels: usize,
        #[arg(long, default_value_t = 8)]
        features: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.25)]
        test_frac: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Expected,
    Greedy,
    Both,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Sweep { common, deltas } => cmd_sweep(&common, deltas.as_deref()),
        Command::Convert {
            input,
            out,
            delta,
            seed,
            logger_frac,
            alpha,
            l2,
            bias,
            label_base,
        } => cmd_convert(&input, &out, delta, seed, logger_frac, alpha, l2, bias, &label_base),
        Command::Eval {
            params,
            test,
            mode,
            label_base,
        } => cmd_eval(&params, &test, mode, &label_base),
        Command::Synth {
            out,
            examples,
            labels,
            features,
            noise,
            seed,
            test_frac,
        } => cmd_synth(&out, examples, labels, features, noise, seed, test_frac),
    }
}

// ── run / sweep ─────────────────────────────────────────────────────────

fn setup(args: &ConfigArgs) -> Result<(ExperimentConfig, Data, PathBuf)> {
    let (cfg, data) = load_config_and_data(&args.config, &args.overrides)
        .with_context(|| format!("loading experiment from {}", args.config.display()))?;
    let dir = args.output.clone().unwrap_or_else(|| cfg.output.clone());
    Ok((cfg, data, dir))
}

fn run_meta(command: &str, cfg: &ExperimentConfig, data: &Data) -> Result<String> {
    Ok(format!(
        "# run metadata\ncommand = {command}\nversion = {}\nthreads = {}\npool_examples = {}\ntest_examples = {}\nlabels = {}\nfeatures = {}\n# configuration\n{}",
        env!("CARGO_PKG_VERSION"),
        worker_pool()?.current_num_threads(),
        data.pool.len(),
        data.test.len(),
        data.pool.labels(),
        data.pool.features(),
        cfg.to_text()
    ))
}

fn cmd_run(args: &ConfigArgs) -> Result<()> {
    let (cfg, data, dir) = setup(args)?;
    let output = run_experiment(&cfg, &data)?;
    let summary = emit_results(&dir, &output, &run_meta("run", &cfg, &data)?)
        .with_context(|| format!("writing results to {}", dir.display()))?;
    println!("algorithm\truns\tfailed\texpected\tgreedy\tp_vs_best");
    for s in &summary {
        println!(
            "{}\t{}\t{}\t{} ± {}\t{} ± {}\t{}",
            s.algorithm,
            s.runs,
            s.failed,
            fmt6(s.expected_mean),
            fmt6(s.expected_se),
            fmt6(s.greedy_mean),
            fmt6(s.greedy_se),
            s.p_vs_best.map(fmt6).unwrap_or_else(|| s.note.clone())
        );
    }
    let failed: usize = summary.iter().map(|s| s.failed).sum();
    if failed > 0 {
        eprintln!("warning: {failed} run(s) failed; see results.csv");
    }
    Ok(())
}

fn cmd_sweep(args: &ConfigArgs, deltas: Option<&str>) -> Result<()> {
    let (cfg, data, dir) = setup(args)?;
    let deltas = match deltas {
        Some(d) => parse_deltas("--deltas", d)?,
        None => cfg.sweep_deltas.clone(),
    };
    let (rows, output) = replay_sweep(&cfg, &data, &deltas)?;
    emit_sweep(&dir, &rows, &output.timings, &run_meta("sweep", &cfg, &data)?)
        .with_context(|| format!("writing sweep to {}", dir.display()))?;
    println!("{} rows written to {}", rows.len(), dir.join("sweep.csv").display());
    Ok(())
}

// ── convert / eval / synth ──────────────────────────────────────────────

fn load_options(label_base: &str) -> Result<LoadOptions> {
    let mut cfg = ExperimentConfig::default();
    cfg.set("dataset.label_base", label_base)?;
    Ok(LoadOptions {
        label_base: cfg.label_base,
        ..Default::default()
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_convert(
    input: &Path,
    out: &Path,
    delta: usize,
    seed: u64,
    logger_frac: f64,
    alpha: f64,
    l2: f64,
    bias: bool,
    label_base: &str,
) -> Result<()> {
    if !(logger_frac > 0.0 && logger_frac <= 1.0) {
        bail!("--logger-frac must be in (0, 1], got {logger_frac}");
    }
    let mut ds = load_multilabel_svmlight(input, &load_options(label_base)?)?;
    if bias {
        ds = ds.with_bias();
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 1])));
    let n_logger = ((logger_frac * ds.len() as f64).ceil() as usize).clamp(1, ds.len());
    let logger_set = ds.subset(&order[..n_logger]);

    let mut cfg = ExperimentConfig::default();
    cfg.logger.alpha = alpha;
    cfg.logger.l2 = l2;
    let logger = train_logger(&logger_set, &cfg.logger)?;
    let log = generate_bandit_log(&logger, &ds, delta, stream_seed(&[seed, 2]))?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_bandit_log(
        &log,
        &LogMetadata::describe(&log, seed, delta),
        &out.join("log.csv"),
        &out.join("log.meta"),
    )?;
    SavedPolicy { params: logger, bias }.save(&out.join("logger.params"))?;
    println!(
        "{} records from {} examples ({} used for the logger), clip M = {}",
        log.len(),
        ds.len(),
        n_logger,
        fmt6(log.clip_m())
    );
    Ok(())
}

fn cmd_eval(params: &Path, test: &Path, mode: Mode, label_base: &str) -> Result<()> {
    let saved = SavedPolicy::load(params)?;
    let options = LoadOptions {
        num_labels: Some(saved.params.labels()),
        num_features: Some(saved.input_features()),
        ..load_options(label_base)?
    };
    let mut ds = load_multilabel_svmlight(test, &options)?;
    if saved.bias {
        ds = ds.with_bias();
    }
    let modes: &[(EvalMode, &str)] = match mode {
        Mode::Expected => &[(EvalMode::Expected, "expected")],
        Mode::Greedy => &[(EvalMode::Greedy, "greedy")],
        Mode::Both => &[(EvalMode::Expected, "expected"), (EvalMode::Greedy, "greedy")],
    };
    for (m, name) in modes {
        println!("{name}_loss = {}", fmt6(evaluate_policy(&saved.params, &ds, *m)?));
    }
    Ok(())
}

fn write_svm(path: &Path, ds: &SupervisedDataset) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_multilabel(ds, &mut BufWriter::new(file)).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(
    out: &Path,
    examples: usize,
    labels: usize,
    features: usize,
    noise: f64,
    seed: u64,
    test_frac: f64,
) -> Result<()> {
    let ds = synthetic_multilabel(&SyntheticSpec {
        examples,
        labels,
        features,
        noise,
        seed,
    })?;
    let data = holdout(&ds, test_frac)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_svm(&out.join("train.svm"), &data.pool)?;
    write_svm(&out.join("test.svm"), &data.test)?;
    println!(
        "{} train / {} test examples in {}",
        data.pool.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}
