mod files;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{debug, info};

use tfdpm::dataset::{write_schema, RawTable};
use tfdpm::{
    best_f1_search, checkpoint, load_dataset, model_hash, predict_and_score, synth, train_scheduler, tune_init,
    DetectOptions, Mode, RunConfig, Scenario, SchedulerNet, SchedulerTraining, Tfdpm, TimeSeriesDataset, TuneOptions,
};

use files::{sidecar, EvalReport, RunMeta, ScoreRow};

const SEED_ENV: &str = "TFDPM_SEED";
const SCHEMA_FILE: &str = "schema.json";

#[derive(Parser)]
#[command(name = "tfdpm", version, about = "Diffusion-based attack detection for CPS time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic plant run: train.csv, test.csv and schema.json.
    Simulate {
        #[arg(long, default_value = "easy")]
        scenario: Scenario,
        #[arg(long, default_value_t = 5000)]
        train_steps: usize,
        #[arg(long, default_value_t = 2000)]
        test_steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the feature extractor and noise-prediction network.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Channel schema; defaults to schema.json beside the data.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// `key = value` configuration file; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the noise-scheduling network against a frozen checkpoint.
    TrainScheduler {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Labelled data for grid-searching the initial (alpha_bar_N, beta_N).
        #[arg(long)]
        val: Option<PathBuf>,
        /// With --val, skip grid points above this many network calls per step.
        #[arg(long)]
        max_calls: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict every step with a full history and write anomaly scores.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sched_ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Best-F1 threshold search over a scores file.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aligned observed/predicted/score/label columns for external plotting.
    Plot {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Full,
    Fast,
}

/// Failure class attached as context; decides the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Failure {
    Usage,
    Data,
    Checkpoint,
}

impl Failure {
    fn code(self) -> u8 {
        match self {
            Failure::Usage => 2,
            Failure::Data => 3,
            Failure::Checkpoint => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Failure::Usage => "usage error",
            Failure::Data => "data error",
            Failure::Checkpoint => "checkpoint error",
        })
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return f.code();
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<tfdpm::Error>() {
            return match e {
                tfdpm::Error::Checkpoint(_) => Failure::Checkpoint.code(),
                tfdpm::Error::Config(_) => Failure::Usage.code(),
                _ => Failure::Data.code(),
            };
        }
    }
    Failure::Data.code()
}

/// `--seed`, then `TFDPM_SEED`, then the fallback.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| anyhow!("{SEED_ENV}={v:?} is not an unsigned integer"))
            .context(Failure::Usage),
        Err(_) => Ok(fallback),
    }
}

fn load_base(path: &Path) -> Result<Tfdpm> {
    checkpoint::load_model(path)
        .with_context(|| format!("loading {}", path.display()))
        .context(Failure::Checkpoint)
}

fn load_for(model: &Tfdpm, path: &Path) -> Result<TimeSeriesDataset> {
    load_dataset(path, &model.channels, Some(&model.norm_stats))
        .with_context(|| format!("reading {}", path.display()))
        .context(Failure::Data)
}

fn simulate(scenario: Scenario, train_steps: usize, test_steps: usize, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = resolve_seed(seed, 0)?;
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .context(Failure::Data)?;
    let run = synth::simulate(scenario, train_steps, test_steps, seed);
    run.train.write_csv(&out.join("train.csv"))?;
    run.test.write_csv(&out.join("test.csv"))?;
    write_schema(&out.join(SCHEMA_FILE), &run.train.channels)?;
    files::write_json(&out.join("attacks.json"), &run.attacks)?;
    info!(
        "wrote {} training and {} test rows with {} attacks to {}",
        run.train.len(),
        run.test.len(),
        run.attacks.len(),
        out.display()
    );
    Ok(())
}

fn train(data: &Path, schema: Option<&Path>, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    cfg.validate()?;
    let schema = schema.map(Path::to_path_buf).unwrap_or_else(|| beside(data, SCHEMA_FILE));
    let channels = tfdpm::dataset::read_schema(&schema).context(Failure::Data)?;
    let raw = RawTable::read_csv(data, &channels)
        .with_context(|| format!("reading {}", data.display()))
        .context(Failure::Data)?;
    let ds = TimeSeriesDataset::from_raw(&raw, None).context(Failure::Data)?;
    let mut model = Tfdpm::for_dataset(&cfg, &ds)?;
    info!(
        "training {} on {} rows x {} columns, seed {}",
        cfg.extractor,
        ds.len(),
        ds.dim(),
        cfg.seed
    );
    let report = model.fit(&ds)?;
    info!(
        "best epoch {} of {}{}",
        report.best_epoch + 1,
        report.epoch_losses.len(),
        if report.stopped_early { " (early stop)" } else { "" }
    );
    checkpoint::save_model(&model, out)?;
    info!("wrote {} ({})", out.display(), model_hash(&model));
    Ok(())
}

fn train_sched(
    ckpt: &Path,
    data: &Path,
    val: Option<&Path>,
    max_calls: Option<f64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let model = load_base(ckpt)?;
    let seed = resolve_seed(seed, model.config.seed)?;
    let ds = load_for(&model, data)?;
    let val = val.map(|p| load_for(&model, p)).transpose()?;
    let mut opts = SchedulerTraining::from(&model.config);
    opts.seed = seed;
    let sched = SchedulerNet::for_model_seeded(&model, seed)?;
    let (mut sched, report) = train_scheduler(&model, &ds, sched, &opts)?;
    info!(
        "scheduler best epoch {} of {}, {} redrawn batches",
        report.best_epoch + 1,
        report.epoch_losses.len(),
        report.redraws
    );
    if let Some(val) = &val {
        let tune = TuneOptions {
            seed,
            max_calls,
            ..TuneOptions::default()
        };
        let r = tune_init(&model, &mut sched, val, &tune).context(Failure::Data)?;
        info!(
            "initial pair ({}, {}): validation f1 {:.4} at {:.1} calls per step",
            r.best.alpha_bar_n, r.best.beta_n, r.best.f1, r.best.mean_calls
        );
        files::write_json(&sidecar(out, "tune.json"), &r)?;
    }
    checkpoint::save_scheduler(&sched, &model, out)?;
    info!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn detect(
    ckpt: &Path,
    sched_ckpt: Option<&Path>,
    data: &Path,
    mode: ModeArg,
    n_samples: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    if mode == ModeArg::Fast && sched_ckpt.is_none() {
        return Err(anyhow!("--mode fast needs --sched-ckpt")).context(Failure::Usage);
    }
    let model = load_base(ckpt)?;
    let sched = match (mode, sched_ckpt) {
        (ModeArg::Fast, Some(p)) => Some(
            checkpoint::load_scheduler(p, &model)
                .with_context(|| format!("loading {}", p.display()))
                .context(Failure::Checkpoint)?,
        ),
        _ => None,
    };
    let ds = load_for(&model, data)?;
    let opts = DetectOptions {
        seed: resolve_seed(seed, model.config.seed)?,
        n_samples: n_samples.unwrap_or(model.config.n_samples),
        ..DetectOptions::default()
    };
    let mode = match &sched {
        Some(s) => Mode::Fast(s),
        None => Mode::Full,
    };
    let det = predict_and_score(&ds, &model, mode, &opts)?;
    for (t, c) in det.time_indices.iter().zip(&det.n_calls) {
        debug!("t {t}: {c} network calls");
    }
    let mean_calls = det.n_calls.iter().sum::<usize>() as f64 / det.q().max(1) as f64;
    info!("{} mode: {} steps scored, {mean_calls:.2} network calls per step", mode.name(), det.q());

    let labels = ds.labels.as_deref();
    let rows: Vec<ScoreRow> = det
        .time_indices
        .iter()
        .enumerate()
        .map(|(i, &t)| ScoreRow {
            time_index: t,
            score: det.scores[i],
            label: labels.map(|l| l[t]),
            n_calls: det.n_calls[i],
        })
        .collect();
    files::write_scores(out, &rows)?;
    files::write_series(&sidecar(out, "series.csv"), &ds.column_names(), &det)?;
    files::write_json(
        &sidecar(out, "meta.json"),
        &RunMeta {
            mode: mode.name().to_string(),
            checkpoint_hash: model_hash(&model),
            seed: opts.seed,
            n_samples: opts.n_samples,
            mean_calls,
        },
    )?;
    if let Some(l) = labels {
        let r = det.report(l)?;
        info!("best f1 {:.4} (precision {:.4}, recall {:.4})", r.f1, r.precision, r.recall);
    }
    info!("wrote {}", out.display());
    Ok(())
}

fn evaluate(scores: &Path, out: &Path) -> Result<()> {
    let rows = files::read_scores(scores)?;
    let labels = files::require_labels(&rows, scores)?;
    let s: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let r = best_f1_search(&s, &labels).context(Failure::Data)?;
    let meta = files::read_meta(&sidecar(scores, "meta.json"))?;
    let report = EvalReport {
        threshold: r.threshold,
        precision: r.precision,
        recall: r.recall,
        f1: r.f1,
        q: r.q(),
        mode: meta.as_ref().map(|m| m.mode.clone()),
        checkpoint_hash: meta.as_ref().map(|m| m.checkpoint_hash.clone()),
        mean_calls: meta.as_ref().map(|m| m.mean_calls),
    };
    files::write_json(out, &report)?;
    info!("f1 {:.4} at threshold {:.6}", r.f1, r.threshold);
    Ok(())
}

fn plot(scores: &Path, out: &Path) -> Result<()> {
    let rows = files::read_scores(scores)?;
    let labels = files::require_labels(&rows, scores)?;
    let series = files::read_series(&sidecar(scores, "series.csv"))?;
    files::write_plot(out, &rows, &labels, &series)?;
    info!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn beside(data: &Path, name: &str) -> PathBuf {
    data.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            scenario,
            train_steps,
            test_steps,
            seed,
            out,
        } => simulate(scenario, train_steps, test_steps, seed, &out),
        Command::Train {
            data,
            schema,
            config,
            seed,
            out,
        } => train(&data, schema.as_deref(), config.as_deref(), seed, &out),
        Command::TrainScheduler {
            ckpt,
            data,
            val,
            max_calls,
            seed,
            out,
        } => train_sched(&ckpt, &data, val.as_deref(), max_calls, seed, &out),
        Command::Detect {
            ckpt,
            sched_ckpt,
            data,
            mode,
            n_samples,
            seed,
            out,
        } => detect(&ckpt, sched_ckpt.as_deref(), &data, mode, n_samples, seed, &out),
        Command::Evaluate { scores, out } => evaluate(&scores, &out),
        Command::Plot { scores, out } => plot(&scores, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Failure::Usage.code() } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
