//! `ser`: speech emotion recognition pipeline driver.
//!
//! Every subcommand resolves its settings as flag, then config file, then
//! built-in default, prints the effective values to stderr, and derives all
//! randomness from the single `--seed`, so any run can be reproduced
//! byte-for-byte from its command line.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on usage or config
//! errors.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use ser_core::analyze::{
    export_embeddings, read_embeddings_csv, reconstruction_mse, tsne2d, write_embeddings_csv,
    write_recon_csv, write_tsne_csv, ReconRow, TsneOptions,
};
use ser_core::audio::{load_manifest, synth_corpus, ClassBalance, CorpusManifest};
use ser_core::dsp::{featurize, FeatureKind, FeatureStore};
use ser_core::model::{CenterMetric, Model, ModelConfig, Variant};
use ser_core::train::{
    assemble_cv_report, fit, fold_seed, make_fold_plans, split_for_fold, summarize_fold,
    write_curve_csv, write_metrics_csv, FitOutcome, FoldPlan, MetricsRow, TrainOptions,
};

use config::{ConfigError, FileConfig, Resolver};

#[derive(Parser)]
#[command(
    name = "ser",
    version,
    about = "Speech emotion recognition: corpus synthesis, features, training, analysis"
)]
struct Cli {
    /// Flat `key = value` settings file; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus and its manifest.
    Synth(SynthArgs),
    /// Extract features for every clip in a manifest into a cache directory.
    Featurize(FeaturizeArgs),
    /// Train one cross-validation fold.
    Train(TrainArgs),
    /// Train every fold and report per-fold and mean test metrics.
    Cv(CvArgs),
    /// Score a saved model on one fold split.
    Eval(EvalArgs),
    /// Export bottleneck embeddings to CSV.
    Embed(EmbedArgs),
    /// Project an embeddings CSV to 2-D.
    Tsne(TsneArgs),
    /// Report reconstruction error for decoder models.
    ReconReport(ReconArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for clips and manifest.
    #[arg(long)]
    out_dir: Option<String>,
    /// Clips per class (balanced corpus).
    #[arg(long)]
    per_class: Option<usize>,
    /// Total clips (imbalanced corpus, needs --percents).
    #[arg(long)]
    total: Option<usize>,
    /// Class percentages `neutral,happiness,sadness,anger`.
    #[arg(long)]
    percents: Option<String>,
    /// Number of recording sessions, 1 to 5.
    #[arg(long)]
    sessions: Option<usize>,
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    manifest: Option<String>,
    /// Feature type: `mfcc` or `spectrogram`.
    #[arg(long)]
    input: Option<String>,
    /// Feature cache directory.
    #[arg(long)]
    features_dir: Option<String>,
}

/// Architecture and loss settings shared by `train` and `cv`.
#[derive(Args)]
struct ModelFlags {
    /// Feature type the model consumes: `mfcc` or `spectrogram`.
    #[arg(long)]
    input: Option<String>,
    /// Supervision variant: `s`, `s+a`, `s+c`, or `s+a+c`.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    kernels_per_path: Option<usize>,
    #[arg(long)]
    fc_width: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lambda_center: Option<f64>,
    #[arg(long)]
    lambda_recon: Option<f64>,
    /// Center penalty metric: `l2` or `l1`.
    #[arg(long)]
    center_metric: Option<String>,
    /// Decoder hidden widths, comma separated.
    #[arg(long)]
    decoder_hidden: Option<String>,
}

/// Optimization settings shared by `train` and `cv`.
#[derive(Args)]
struct LoopFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    features_dir: Option<String>,
    /// Which session to hold out.
    #[arg(long)]
    fold: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    optim: LoopFlags,
    /// Checkpoint path for the trained model.
    #[arg(long)]
    model_out: Option<String>,
    /// Per-epoch loss CSV.
    #[arg(long)]
    curve_out: Option<String>,
    /// Test metrics CSV.
    #[arg(long)]
    metrics_out: Option<String>,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    features_dir: Option<String>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    optim: LoopFlags,
    /// Worker threads for folds.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    metrics_out: Option<String>,
    /// Directory for per-fold loss curves.
    #[arg(long)]
    curve_dir: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Saved checkpoint.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    features_dir: Option<String>,
    #[arg(long)]
    fold: Option<usize>,
    /// Which side of the fold: `train`, `val`, or `test`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    metrics_out: Option<String>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    features_dir: Option<String>,
    /// Restrict to one fold split instead of the whole corpus.
    #[arg(long)]
    fold: Option<usize>,
    /// With --fold: `train`, `val`, or `test`.
    #[arg(long)]
    split: Option<String>,
    /// Sample at most this many clips per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Output CSV.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct TsneArgs {
    /// Embeddings CSV from `ser embed`.
    #[arg(long)]
    embeddings: Option<String>,
    #[arg(long)]
    perplexity: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Output CSV.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct ReconArgs {
    /// Checkpoint path; repeat or comma-separate for several models.
    #[arg(long)]
    model: Vec<String>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    features_dir: Option<String>,
    /// Output CSV.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Split, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

enum AppError {
    Usage(ConfigError),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> AppError {
        AppError::Usage(e)
    }
}

impl From<anyhow::Error> for AppError {
    fn from(e: anyhow::Error) -> AppError {
        AppError::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version print to stdout and exit 0; usage errors exit 2
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let file_config = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Synth(args) => cmd_synth(&cli, &file_config, args),
        Command::Featurize(args) => cmd_featurize(&cli, &file_config, args),
        Command::Train(args) => cmd_train(&cli, &file_config, args),
        Command::Cv(args) => cmd_cv(&cli, &file_config, args),
        Command::Eval(args) => cmd_eval(&cli, &file_config, args),
        Command::Embed(args) => cmd_embed(&cli, &file_config, args),
        Command::Tsne(args) => cmd_tsne(&cli, &file_config, args),
        Command::ReconReport(args) => cmd_recon_report(&cli, &file_config, args),
    }
}

/// Parses an already-resolved textual setting, attributing failures to its
/// key for a usage-level error.
fn parse_as<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse::<T>().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_percents(value: &str) -> Result<[f64; 4], ConfigError> {
    let parts: Vec<&str> = value.split(',').collect();
    let bad = || ConfigError::BadValue {
        key: "percents".to_string(),
        value: value.to_string(),
        expected: "four comma-separated numbers",
    };
    if parts.len() != 4 {
        return Err(bad());
    }
    let mut out = [0.0; 4];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p.trim().parse::<f64>().map_err(|_| bad())?;
    }
    Ok(out)
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|p| {
            p.trim().parse::<usize>().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                expected: "comma-separated integers",
            })
        })
        .collect()
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    Ok(())
}

fn resolve_seed(cli: &Cli, r: &mut Resolver) -> Result<u64, ConfigError> {
    r.value(cli.seed, "seed", "integer", 0)
}

fn resolve_model_config(
    r: &mut Resolver,
    flags: &ModelFlags,
) -> Result<ModelConfig, ConfigError> {
    let defaults = ModelConfig::default();
    let input = r.value(
        flags.input.clone(),
        "input",
        "mfcc|spectrogram",
        defaults.input.to_string(),
    )?;
    let variant = r.value(
        flags.variant.clone(),
        "variant",
        "s|s+a|s+c|s+a+c",
        defaults.variant.to_string(),
    )?;
    let kernels_per_path = r.value(
        flags.kernels_per_path,
        "kernels-per-path",
        "integer",
        defaults.kernels_per_path,
    )?;
    let fc_width = r.value(flags.fc_width, "fc-width", "integer", defaults.fc_width)?;
    let dropout = r.value(flags.dropout, "dropout", "number", defaults.dropout)?;
    let lambda_center = r.value(
        flags.lambda_center,
        "lambda-center",
        "number",
        defaults.lambda_center,
    )?;
    let lambda_recon = r.value(
        flags.lambda_recon,
        "lambda-recon",
        "number",
        defaults.lambda_recon,
    )?;
    let center_metric = r.value(
        flags.center_metric.clone(),
        "center-metric",
        "l2|l1",
        "l2".to_string(),
    )?;
    let decoder_hidden = r.value(
        flags.decoder_hidden.clone(),
        "decoder-hidden",
        "comma-separated integers",
        defaults
            .decoder_hidden
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(","),
    )?;
    Ok(ModelConfig {
        input: parse_as::<FeatureKind>("input", &input, "mfcc|spectrogram")?,
        variant: parse_as::<Variant>("variant", &variant, "s|s+a|s+c|s+a+c")?,
        kernels_per_path,
        fc_width,
        dropout,
        lambda_center,
        lambda_recon,
        center_metric: parse_as::<CenterMetric>("center-metric", &center_metric, "l2|l1")?,
        decoder_hidden: parse_widths("decoder-hidden", &decoder_hidden)?,
        ..defaults
    })
}

fn resolve_train_options(
    cli: &Cli,
    r: &mut Resolver,
    flags: &LoopFlags,
) -> Result<TrainOptions, ConfigError> {
    let defaults = TrainOptions::default();
    let epochs = r.value(flags.epochs, "epochs", "integer", defaults.epochs)?;
    let batch_size = r.value(flags.batch_size, "batch-size", "integer", defaults.batch_size)?;
    let patience = r.value(flags.patience, "patience", "integer", 10)?;
    let seed = resolve_seed(cli, r)?;
    Ok(TrainOptions {
        epochs,
        batch_size,
        seed,
        patience: (patience > 0).then_some(patience),
    })
}

fn load_corpus(
    manifest_path: &str,
    features_dir: &str,
    kind: FeatureKind,
) -> anyhow::Result<(CorpusManifest, FeatureStore)> {
    let manifest = load_manifest(Path::new(manifest_path))
        .with_context(|| format!("loading manifest {manifest_path}"))?;
    let store = FeatureStore::load_for_manifest(Path::new(features_dir), &manifest, kind)
        .with_context(|| format!("loading {kind} features from {features_dir}"))?;
    Ok((manifest, store))
}

fn plan_for_fold(manifest: &CorpusManifest, fold: usize) -> anyhow::Result<FoldPlan> {
    let plans = make_fold_plans(manifest)?;
    plans
        .into_iter()
        .find(|p| p.held_out_session == fold)
        .ok_or_else(|| anyhow::anyhow!("manifest has no session {fold} to hold out"))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

fn cmd_synth(cli: &Cli, cfg: &FileConfig, args: &SynthArgs) -> Result<(), AppError> {
    let mut r = Resolver::new(cfg);
    let out_dir = r.required(args.out_dir.clone(), "out-dir", "path")?;
    let sessions = r.value(args.sessions, "sessions", "integer", 5)?;
    let total = r.optional(args.total, "total", "integer")?;
    let percents = r.optional(args.percents.clone(), "percents", "numbers")?;
    let balance = if total.is_some() || percents.is_some() {
        let total = total.ok_or(ConfigError::BadValue {
            key: "total".into(),
            value: "<missing>".into(),
            expected: "an integer when percents is set",
        })?;
        let percents = percents.ok_or(ConfigError::BadValue {
            key: "percents".into(),
            value: "<missing>".into(),
            expected: "four numbers when total is set",
        })?;
        ClassBalance::Imbalanced {
            total,
            percents: parse_percents(&percents)?,
        }
    } else {
        let per_class = r.required(args.per_class, "per-class", "integer")?;
        ClassBalance::Balanced { per_class }
    };
    let seed = resolve_seed(cli, &mut r)?;
    eprint!("{}", r.report("synth"));

    let manifest = synth_corpus(Path::new(&out_dir), &balance, sessions, seed)
        .with_context(|| format!("synthesizing corpus in {out_dir}"))
        .map_err(AppError::from)?;
    println!(
        "synth: {} clips ({} per class) in {}",
        manifest.entries.len(),
        manifest
            .class_counts
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("/"),
        out_dir
    );
    Ok(())
}

fn cmd_featurize(cli: &Cli, cfg: &FileConfig, args: &FeaturizeArgs) -> Result<(), AppError> {
    let mut r = Resolver::new(cfg);
    let manifest_path = r.required(args.manifest.clone(), "manifest", "path")?;
    let input = r.value(args.input.clone(), "input", "mfcc|spectrogram", "mfcc".into())?;
    let features_dir = r.required(args.features_dir.clone(), "features-dir", "path")?;
    let _ = resolve_seed(cli, &mut r)?; // feature extraction is deterministic
    eprint!("{}", r.report("featurize"));

    let kind = parse_as::<FeatureKind>("input", &input, "mfcc|spectrogram")?;
    let manifest = load_manifest(Path::new(&manifest_path))
        .with_context(|| format!("loading manifest {manifest_path}"))
        .map_err(AppError::from)?;
    let written = featurize(&manifest, kind, Path::new(&features_dir))
        .context("extracting features")
        .map_err(AppError::from)?;
    println!("featurize: {written} {kind} matrices in {features_dir}");
    Ok(())
}

fn metrics_row(outcome: &FitOutcome, config: &ModelConfig) -> MetricsRow {
    MetricsRow {
        variant: config.variant.to_string(),
        input: config.input.to_string(),
        fold: outcome.plan.label(),
        overall: outcome.test.metrics.overall,
        class_mean: outcome.test.metrics.class_mean,
        recon_mse: outcome.test.recon_mse,
    }
}

fn cmd_train(cli: &Cli, cfg: &FileConfig, args: &TrainArgs) -> Result<(), AppError> {
    let mut r = Resolver::new(cfg);
    let manifest_path = r.required(args.manifest.clone(), "manifest", "path")?;
    let features_dir = r.required(args.features_dir.clone(), "features-dir", "path")?;
    let fold = r.value(args.fold, "fold", "integer", 1)?;
    let model_config = resolve_model_config(&mut r, &args.model)?;
    let opts = resolve_train_options(cli, &mut r, &args.optim)?;
    let model_out = r.optional(args.model_out.clone(), "model-out", "path")?;
    let curve_out = r.optional(args.curve_out.clone(), "curve-out", "path")?;
    let metrics_out = r.optional(args.metrics_out.clone(), "metrics-out", "path")?;
    eprint!("{}", r.report("train"));

    let (manifest, store) = load_corpus(&manifest_path, &features_dir, model_config.input)?;
    let plan = plan_for_fold(&manifest, fold)?;
    let outcome = fit(&model_config, &manifest, &store, &plan, &opts)
        .with_context(|| format!("training fold {fold}"))
        .map_err(AppError::from)?;

    println!(
        "fold {}: overall_acc={:.6} class_acc={:.6} recon_mse={} epochs={} best_epoch={}",
        plan.label(),
        outcome.test.metrics.overall,
        outcome.test.metrics.class_mean,
        fmt_metric(outcome.test.recon_mse),
        outcome.log.epochs_run,
        outcome
            .log
            .best_epoch
            .map(|e| e.to_string())
            .unwrap_or_else(|| "-".into()),
    );
    if let Some(path) = model_out {
        let path = Path::new(&path);
        ensure_parent(path)?;
        outcome.model.save(path).context("saving checkpoint").map_err(AppError::from)?;
    }
    if let Some(path) = curve_out {
        let path = Path::new(&path);
        ensure_parent(path)?;
        write_curve_csv(path, &outcome.log.curve).context("writing curve")?;
    }
    if let Some(path) = metrics_out {
        let path = Path::new(&path);
        ensure_parent(path)?;
        write_metrics_csv(path, &[metrics_row(&outcome, &model_config)])
            .context("writing metrics")?;
    }
    Ok(())
}

fn cmd_cv(cli: &Cli, cfg: &FileConfig, args: &CvArgs) -> Result<(), AppError> {
    let mut r = Resolver::new(cfg);
    let manifest_path = r.required(args.manifest.clone(), "manifest", "path")?;
    let features_dir = r.required(args.features_dir.clone(), "features-dir", "path")?;
    let model_config = resolve_model_config(&mut r, &args.model)?;
    let opts = resolve_train_options(cli, &mut r, &args.optim)?;
    let jobs = r.value(args.jobs, "jobs", "integer", 1)?.max(1);
    let metrics_out = r.optional(args.metrics_out.clone(), "metrics-out", "path")?;
    let curve_dir = r.optional(args.curve_dir.clone(), "curve-dir", "path")?;
    eprint!("{}", r.report("cv"));

    let (manifest, store) = load_corpus(&manifest_path, &features_dir, model_config.input)?;
    let plans = make_fold_plans(&manifest).map_err(anyhow::Error::from)?;

    // fold seeds depend only on the root seed and the held-out session, so
    // results are identical for any --jobs value
    let run_plan = |plan: &FoldPlan| -> anyhow::Result<FitOutcome> {
        let fold_opts = TrainOptions {
            seed: fold_seed(opts.seed, plan.held_out_session),
            ..opts.clone()
        };
        fit(&model_config, &manifest, &store, plan, &fold_opts)
            .with_context(|| format!("training fold {}", plan.label()))
    };

    let mut outcomes: Vec<FitOutcome> = if jobs == 1 {
        plans.iter().map(&run_plan).collect::<anyhow::Result<_>>()?
    } else {
        let run_plan = &run_plan;
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in plans.chunks(plans.len().div_ceil(jobs)) {
                handles.push(
                    scope.spawn(move || {
                        chunk.iter().map(run_plan).collect::<anyhow::Result<Vec<_>>>()
                    }),
                );
            }
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("fold worker panicked")?);
            }
            anyhow::Ok(all)
        })?
    };
    outcomes.sort_by_key(|o| o.plan.held_out_session);

    let report = assemble_cv_report(outcomes.iter().map(summarize_fold).collect())
        .map_err(anyhow::Error::from)?;
    let mut rows: Vec<MetricsRow> = outcomes
        .iter()
        .map(|o| metrics_row(o, &model_config))
        .collect();
    rows.push(MetricsRow {
        variant: model_config.variant.to_string(),
        input: model_config.input.to_string(),
        fold: "mean".into(),
        overall: report.mean_overall,
        class_mean: report.mean_class,
        recon_mse: report.mean_recon,
    });
    for row in &rows {
        println!(
            "fold {}: overall_acc={:.6} class_acc={:.6} recon_mse={}",
            row.fold,
            row.overall,
            row.class_mean,
            fmt_metric(row.recon_mse)
        );
    }
    if let Some(path) = metrics_out {
        let path = Path::new(&path);
        ensure_parent(path)?;
        write_metrics_csv(path, &rows).context("writing metrics")?;
    }
    if let Some(dir) = curve_dir {
        let dir = Path::new(&dir);
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(AppError::from)?;
        for o in &outcomes {
            write_curve_csv(&dir.join(format!("curve_fold{}.csv", o.plan.label())), &o.log.curve)
                .context("writing curve")?;
        }
    }
    Ok(())
}

fn split_entries(
    manifest: &CorpusManifest,
    plan: &FoldPlan,
    split: Split,
) -> Vec<ser_core::audio::DatasetEntry> {
    let (train, val, test) = split_for_fold(manifest, plan);
    match split {
        Split::Train => train,
        Split::Val => val,
        Split::Test => test,
    }
}

fn cmd_eval(cli: &Cli, cfg: &FileConfig, args: &EvalArgs) -> Result<(), AppError> {
    let mut r = Resolver::new(cfg);
    let model_path = r.required(args.model.clone(), "model", "path")?;
    let manifest_path = r.required(args.manifest.clone(), "manifest", "path")?;
    let features_dir = r.required(args.features_dir.clone(), "features-dir", "path")?;
    let fold = r.value(args.fold, "fold", "integer", 1)?;
    let split_name = r.value(args.split.clone(), "split", "train|val|test", "test".into())?;
    let metrics_out = r.optional(args.metrics_out.clone(), "metrics-out", "path")?;
    let _ = resolve_seed(cli, &mut r)?; // evaluation is deterministic
    eprint!("{}", r.report("eval"));

    let split = parse_as::<Split>("split", &split_name, "train|val|test")?;
    let model = Model::load(Path::new(&model_path))
        .with_context(|| format!("loading checkpoint {model_path}"))
        .map_err(AppError::from)?;
    let (manifest, store) = load_corpus(&manifest_path, &features_dir, model.config().input)?;
    let plan = plan_for_fold(&manifest, fold)?;
    let entries = split_entries(&manifest, &plan, split);
    let report = ser_core::train::evaluate(&model, &entries, &store)
        .with_context(|| format!("scoring {split} of fold {fold}"))
        .map_err(AppError::from)?;

    println!(
        "{} fold {}: n={} overall_acc={:.6} class_acc={:.6} recon_mse={}",
        split,
        plan.label(),
        report.metrics.total,
        report.metrics.overall,
        report.metrics.class_mean,
        fmt_metric(report.recon_mse)
    );
    if let Some(path) = metrics_out {
        let path = Path::new(&path);
        ensure_parent(path)?;
        write_metrics_csv(
            path,
            &[MetricsRow {
                variant: model.config().variant.to_string(),
                input: model.config().input.to_string(),
                fold: plan.label(),
                overall: report.metrics.overall,
                class_mean: report.metrics.class_mean,
                recon_mse: report.recon_mse,
            }],
        )
        .context("writing metrics")?;
    }
    Ok(())
}

fn cmd_embed(cli: &Cli, cfg: &FileConfig, args: &EmbedArgs) -> Result<(), AppError> {
    let mut r = Resolver::new(cfg);
    let model_path = r.required(args.model.clone(), "model", "path")?;
    let manifest_path = r.required(args.manifest.clone(), "manifest", "path")?;
    let features_dir = r.required(args.features_dir.clone(), "features-dir", "path")?;
    let fold = r.optional(args.fold, "fold", "integer")?;
    let per_class = r.optional(args.per_class, "per-class", "integer")?;
    let out = r.required(args.out.clone(), "out", "path")?;
    let seed = resolve_seed(cli, &mut r)?;

    let model = Model::load(Path::new(&model_path))
        .with_context(|| format!("loading checkpoint {model_path}"))
        .map_err(AppError::from)?;
    let (manifest, store) = load_corpus(&manifest_path, &features_dir, model.config().input)?;
    let entries = match fold {
        Some(fold) => {
            let split_name =
                r.value(args.split.clone(), "split", "train|val|test", "test".into())?;
            let split = parse_as::<Split>("split", &split_name, "train|val|test")?;
            let plan = plan_for_fold(&manifest, fold)?;
            split_entries(&manifest, &plan, split)
        }
        None => manifest.entries.clone(),
    };
    eprint!("{}", r.report("embed"));

    let set = export_embeddings(&model, &entries, &store, per_class, seed)
        .context("exporting embeddings")
        .map_err(AppError::from)?;
    let out = Path::new(&out);
    ensure_parent(out)?;
    write_embeddings_csv(out, &set).context("writing embeddings")?;
    println!("embed: {} rows of dim {} -> {}", set.len(), set.dim, out.display());
    Ok(())
}

fn cmd_tsne(cli: &Cli, cfg: &FileConfig, args: &TsneArgs) -> Result<(), AppError> {
    let mut r = Resolver::new(cfg);
    let embeddings = r.required(args.embeddings.clone(), "embeddings", "path")?;
    let perplexity = r.value(args.perplexity, "perplexity", "number", 30.0)?;
    let iters = r.value(args.iters, "iters", "integer", 1000)?;
    let out = r.required(args.out.clone(), "out", "path")?;
    let seed = resolve_seed(cli, &mut r)?;
    eprint!("{}", r.report("tsne"));

    let set = read_embeddings_csv(Path::new(&embeddings))
        .with_context(|| format!("reading embeddings {embeddings}"))
        .map_err(AppError::from)?;
    let result = tsne2d(
        &set,
        &TsneOptions {
            perplexity,
            iters,
            seed,
            ..TsneOptions::default()
        },
    )
    .context("projecting embeddings")
    .map_err(AppError::from)?;
    let out = Path::new(&out);
    ensure_parent(out)?;
    write_tsne_csv(out, &set.labels, &result.coords).context("writing projection")?;
    println!(
        "tsne: {} points, final kl={:.6} -> {}",
        set.len(),
        result.kl_trace.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_recon_report(cli: &Cli, cfg: &FileConfig, args: &ReconArgs) -> Result<(), AppError> {
    let mut r = Resolver::new(cfg);
    let models: Vec<String> = if args.model.is_empty() {
        let joined = r.required(None::<String>, "model", "paths")?;
        joined.split(',').map(|s| s.trim().to_string()).collect()
    } else {
        let joined = args.model.join(",");
        let v = r.value(Some(joined), "model", "paths", String::new())?;
        v.split(',').map(|s| s.trim().to_string()).collect()
    };
    let manifest_path = r.required(args.manifest.clone(), "manifest", "path")?;
    let features_dir = r.required(args.features_dir.clone(), "features-dir", "path")?;
    let out = r.required(args.out.clone(), "out", "path")?;
    let _ = resolve_seed(cli, &mut r)?;
    eprint!("{}", r.report("recon-report"));

    let manifest = load_manifest(Path::new(&manifest_path))
        .with_context(|| format!("loading manifest {manifest_path}"))
        .map_err(AppError::from)?;
    let mut rows = Vec::new();
    for path in &models {
        let model = Model::load(Path::new(path))
            .with_context(|| format!("loading checkpoint {path}"))
            .map_err(AppError::from)?;
        let store = FeatureStore::load_for_manifest(
            Path::new(&features_dir),
            &manifest,
            model.config().input,
        )
        .with_context(|| format!("loading features for {path}"))
        .map_err(AppError::from)?;
        let mse = reconstruction_mse(&model, &manifest.entries, &store)
            .with_context(|| format!("reconstructing with {path}"))
            .map_err(AppError::from)?;
        println!(
            "recon {}: variant={} input={} mse={:.6}",
            path,
            model.config().variant,
            model.config().input,
            mse
        );
        rows.push(ReconRow {
            variant: model.config().variant.to_string(),
            input: model.config().input.to_string(),
            mse,
        });
    }
    let out = Path::new(&out);
    ensure_parent(out)?;
    write_recon_csv(out, &rows).context("writing report")?;
    Ok(())
}
