//! `hpsurv`: synthesize cohorts, train, fine-tune, evaluate and predict.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hyperplane_survival::checkpoint::{checkpoint_bytes, load_checkpoint};
use hyperplane_survival::cohort_io::{read_cohort, write_csv, write_jsonl};
use hyperplane_survival::config::ExperimentConfig;
use hyperplane_survival::losses::TrainingMode;
use hyperplane_survival::metrics::{
    evaluate, fit_on_validation, write_km_csv, BootstrapSettings, EvalOptions, PostHorizonConverters,
    DEFAULT_CUT_POINTS,
};
use hyperplane_survival::predict::{parse_horizons, predict_cohort, write_predictions_csv};
use hyperplane_survival::synth::generate;
use hyperplane_survival::trainer::{finetune_unsupervised_with_observer, train_with_observer, EpochRecord};
use hyperplane_survival::{validate_cohort, Cohort};

#[derive(Parser)]
#[command(name = "hpsurv", version, about = "Continuous-time conversion forecasting with parallel hyperplanes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with [train] and [synth] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. --set train.epochs=10 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random component; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides, self.seed).context("loading configuration")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and its ground-truth sidecar.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Cohort output path (.jsonl or .csv).
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth sidecar path; defaults to <out stem>.truth.csv.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Split into consecutive parts, e.g. train:200,val:50,test:50.
        /// Each part is written next to --out as <stem>.<name>.<ext>.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train a model from scratch.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch history (JSON lines); defaults to <out>.history.jsonl.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on unlabeled data.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cohort to adapt on; any labels it carries are ignored.
        #[arg(long)]
        unlabeled: PathBuf,
        /// Labeled cohort used for model selection.
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled cohort.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        /// Comma-separated horizons in months.
        #[arg(long, default_value = "6,12,24")]
        horizons: String,
        /// Number of eye-level bootstrap resamples.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Seed for bootstrap resampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write Kaplan-Meier curves of the calibrated-risk groups to this CSV.
        #[arg(long)]
        km: Option<PathBuf>,
        /// Fit the calibrator and thresholds on this labeled validation cohort.
        #[arg(long)]
        calibrate_on: Option<PathBuf>,
        /// Exclude converters whose event falls after the horizon instead of counting them negative.
        #[arg(long)]
        exclude_late_converters: bool,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-visit risk and conversion probabilities.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        /// Comma-separated horizons in months.
        #[arg(long = "t", default_value = "6,12,24")]
        t: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a cohort file against the data invariants.
    Validate {
        #[arg(long)]
        cohort: PathBuf,
    },
}

/// Writes every file to a temporary sibling first and renames only after all
/// writes succeeded, so a failure leaves no partial outputs behind.
fn write_all_atomic(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    let mut staged = Vec::with_capacity(files.len());
    let cleanup = |staged: &[(PathBuf, &PathBuf)]| {
        for (tmp, _) in staged {
            let _ = fs::remove_file(tmp);
        }
    };
    for (path, bytes) in files {
        let mut tmp = path.clone().into_os_string();
        tmp.push(format!(".tmp-{}", std::process::id()));
        let tmp = PathBuf::from(tmp);
        if let Err(e) = fs::write(&tmp, bytes) {
            cleanup(&staged);
            return Err(e).with_context(|| format!("writing {}", path.display()));
        }
        staged.push((tmp, path));
    }
    for (tmp, path) in &staged {
        fs::rename(tmp, path).with_context(|| format!("moving output into {}", path.display()))?;
    }
    Ok(())
}

fn cohort_bytes(cohort: &Cohort, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        write_csv(cohort, &mut buf)?;
    } else {
        write_jsonl(cohort, &mut buf)?;
    }
    Ok(buf)
}

fn sibling(path: &Path, tag: &str, ext: Option<&str>) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = ext
        .map(str::to_string)
        .or_else(|| path.extension().map(|e| e.to_string_lossy().into_owned()));
    let name = match ext {
        Some(e) => format!("{stem}.{tag}.{e}"),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

fn parse_split(spec: &str) -> Result<Vec<(String, usize)>> {
    spec.split(',')
        .map(|part| {
            let (name, n) = part
                .split_once(':')
                .with_context(|| format!("split part {part:?} is not name:count"))?;
            let n: usize = n.trim().parse().with_context(|| format!("bad count in split part {part:?}"))?;
            if name.trim().is_empty() {
                bail!("empty split name in {part:?}");
            }
            Ok((name.trim().to_string(), n))
        })
        .collect()
}

fn load_valid_cohort(path: &Path) -> Result<Cohort> {
    let cohort = read_cohort(path).with_context(|| format!("reading cohort {}", path.display()))?;
    let report = validate_cohort(&cohort);
    if let Some(first) = report.violations.first() {
        bail!(
            "{} fails validation ({} violations); first: {first}",
            path.display(),
            report.violations.len()
        );
    }
    Ok(cohort)
}

/// Streams epoch records to a JSON-lines file as they arrive.
struct HistoryWriter {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl HistoryWriter {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating history file {}", path.display()))?;
        Ok(Self { out: BufWriter::new(file), error: None })
    }

    fn record(&mut self, r: &EpochRecord) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(r).expect("epoch records serialize");
        if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
            self.error = Some(e);
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e).context("writing history");
        }
        self.out.flush()?;
        Ok(())
    }
}

fn history_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".history.jsonl");
        PathBuf::from(p)
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out, truth, split } => {
            let cfg = cfg.load()?;
            let parts = split.as_deref().map(parse_split).transpose()?;
            let (cohort, gt) = generate(&cfg.synth).context("generating cohort")?;
            let mut files = Vec::new();
            match parts {
                None => files.push((out.clone(), cohort_bytes(&cohort, &out)?)),
                Some(parts) => {
                    let sizes: Vec<usize> = parts.iter().map(|p| p.1).collect();
                    for ((name, _), part) in parts.iter().zip(cohort.split(&sizes)?) {
                        let path = sibling(&out, name, None);
                        files.push((path.clone(), cohort_bytes(&part, &path)?));
                    }
                }
            }
            let mut truth_bytes = Vec::new();
            gt.write_csv(&mut truth_bytes)?;
            files.push((truth.unwrap_or_else(|| sibling(&out, "truth", Some("csv"))), truth_bytes));
            write_all_atomic(&files)?;
            eprintln!(
                "wrote {} eyes ({} converters, rate scale {:.4})",
                cohort.eyes().len(),
                cohort.n_converters(),
                gt.rate_scale
            );
        }
        Command::Train { cfg, train, val, out, history } => {
            let cfg = cfg.load()?;
            let train_cohort = load_valid_cohort(&train)?;
            let val_cohort = load_valid_cohort(&val)?;
            if cfg.train.mode == TrainingMode::Supervised && !train_cohort.is_labeled() {
                bail!(
                    "mode mismatch: supervised training needs a labeled cohort, but {} carries no labels \
                     (use train.mode=unsupervised)",
                    train.display()
                );
            }
            let mut hist = HistoryWriter::create(&history_path(&out, history))?;
            let trained = train_with_observer(&train_cohort, &val_cohort, &cfg.train, &mut |r| hist.record(r))
                .context("training")?;
            hist.finish()?;
            write_all_atomic(&[(out.clone(), checkpoint_bytes(&trained)?)])?;
            eprintln!(
                "best epoch {:?}, validation metric {:?}",
                trained.history.best_epoch, trained.history.best_metric
            );
        }
        Command::Finetune { cfg, checkpoint, unlabeled, val, out, history } => {
            let mut cfg = cfg.load()?;
            cfg.train.mode = TrainingMode::Unsupervised;
            let start = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let target = load_valid_cohort(&unlabeled)?;
            let val_cohort = load_valid_cohort(&val)?;
            let mut hist = HistoryWriter::create(&history_path(&out, history))?;
            let tuned = finetune_unsupervised_with_observer(&start, &target, &val_cohort, &cfg.train, &mut |r| {
                hist.record(r)
            })
            .context("fine-tuning")?;
            hist.finish()?;
            write_all_atomic(&[(out.clone(), checkpoint_bytes(&tuned)?)])?;
        }
        Command::Eval {
            checkpoint,
            cohort,
            horizons,
            bootstrap,
            seed,
            km,
            calibrate_on,
            exclude_late_converters,
            out,
        } => {
            let trained = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let horizons = parse_horizons(&horizons)?;
            let policy = if exclude_late_converters {
                PostHorizonConverters::Exclude
            } else {
                PostHorizonConverters::Negative
            };
            let data = load_valid_cohort(&cohort)?;
            let (calibrator, thresholds) = match calibrate_on {
                Some(path) => {
                    let val = load_valid_cohort(&path)?;
                    let fit = fit_on_validation(&trained.model, &val, &horizons, policy)
                        .context("fitting calibrator on validation cohort")?;
                    (Some(fit.calibrator), fit.thresholds)
                }
                None => (trained.calibrator.clone(), vec![None; horizons.len()]),
            };
            let opts = EvalOptions {
                horizons_months: horizons,
                policy,
                thresholds,
                bootstrap: bootstrap.map(|n| BootstrapSettings { n_resamples: n, seed }),
                km_cut_points: km.as_ref().map(|_| DEFAULT_CUT_POINTS.to_vec()),
            };
            let (report, groups) = evaluate(&trained.model, &data, calibrator.as_ref(), &opts)?;
            let mut files = Vec::new();
            if let (Some(path), Some(groups)) = (km, groups) {
                let mut buf = Vec::new();
                write_km_csv(&groups, &mut buf)?;
                files.push((path, buf));
            }
            let text = report.to_json()? + "\n";
            match out {
                Some(path) => files.push((path, text.into_bytes())),
                None => print!("{text}"),
            }
            write_all_atomic(&files)?;
        }
        Command::Predict { checkpoint, cohort, t, out } => {
            let trained = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let horizons = parse_horizons(&t)?;
            let data = load_valid_cohort(&cohort)?;
            let rows = predict_cohort(&trained.model, trained.calibrator.as_ref(), &data, &horizons)?;
            let mut buf = Vec::new();
            write_predictions_csv(&rows, &horizons, &mut buf)?;
            write_all_atomic(&[(out, buf)])?;
        }
        Command::Validate { cohort } => {
            let data = read_cohort(&cohort).with_context(|| format!("reading cohort {}", cohort.display()))?;
            let report = validate_cohort(&data);
            for v in &report.violations {
                println!("{v}");
            }
            if !report.is_valid() {
                bail!("{} violations", report.violations.len());
            }
            println!(
                "ok: {} eyes, {} visits, {}",
                data.eyes().len(),
                data.n_visits(),
                if data.is_labeled() { "labeled" } else { "unlabeled" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
