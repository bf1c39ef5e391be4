//! Training: Adadelta, session-held-out fold planning, the epoch loop with
//! early stopping, and evaluation.
//!
//! The cross-validation protocol holds out one recording session per fold.
//! Within the held-out session, the lexicographically first speaker becomes
//! the validation speaker and the other the test speaker, so no session or
//! speaker ever appears on both sides of a split. Training batches are
//! reshuffled every epoch from one seeded stream; a trailing batch of one
//! sample is skipped because batch statistics are undefined for it.
//!
//! Early stopping watches validation class accuracy (mean per-class recall)
//! and restores the best snapshot when patience runs out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::audio::{AudioError, CorpusManifest, DatasetEntry, EmotionClass};
use crate::autograd::AutogradError;
use crate::dsp::{DspError, FeatureMatrix, FeatureStore};
use crate::model::{DropoutStreams, Model, ModelConfig, ModelError};
use crate::rng::{derive_rng, derive_seed};

pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;
pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training options: {0}")]
    InvalidOptions(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("session {session} has {count} speakers, need exactly 2")]
    InsufficientSpeakers { session: usize, count: usize },
    #[error("training set has {0} usable samples, need at least 2")]
    EmptyTrainingSet(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Adadelta accumulators, one pair per parameter.
///
/// `E[g^2] <- rho E[g^2] + (1-rho) g^2`, then
/// `dx = -(sqrt(E[dx^2]+eps)/sqrt(E[g^2]+eps)) g`, then
/// `E[dx^2] <- rho E[dx^2] + (1-rho) dx^2`. No learning rate.
#[derive(Debug, Default)]
pub struct AdadeltaState {
    accum: BTreeMap<String, Accum>,
}

#[derive(Debug)]
struct Accum {
    eg2: Vec<f64>,
    edx2: Vec<f64>,
}

impl AdadeltaState {
    pub fn new() -> AdadeltaState {
        AdadeltaState::default()
    }

    /// Updates one parameter in place.
    pub fn apply(
        &mut self,
        name: &str,
        values: &mut [f64],
        grads: &[f64],
    ) -> Result<(), TrainError> {
        if grads.len() != values.len() {
            return Err(TrainError::InvalidOptions(format!(
                "{name}: {} grads for {} values",
                grads.len(),
                values.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
        let acc = self.accum.entry(name.to_string()).or_insert_with(|| Accum {
            eg2: vec![0.0; values.len()],
            edx2: vec![0.0; values.len()],
        });
        for i in 0..values.len() {
            let g = grads[i];
            acc.eg2[i] = ADADELTA_RHO * acc.eg2[i] + (1.0 - ADADELTA_RHO) * g * g;
            let dx = -((acc.edx2[i] + ADADELTA_EPS).sqrt() / (acc.eg2[i] + ADADELTA_EPS).sqrt())
                * g;
            acc.edx2[i] = ADADELTA_RHO * acc.edx2[i] + (1.0 - ADADELTA_RHO) * dx * dx;
            values[i] += dx;
        }
        Ok(())
    }

    /// One optimizer step over every parameter that received a gradient.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<(), TrainError> {
        for (name, g) in grads {
            let values = model.param_values_mut(name).ok_or_else(|| {
                TrainError::InvalidOptions(format!("gradient for unknown parameter {name}"))
            })?;
            self.apply(name, values, g)?;
        }
        Ok(())
    }
}

/// One cross-validation fold: a held-out session split into a validation
/// speaker and a test speaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub held_out_session: usize,
    pub val_speaker: String,
    pub test_speaker: String,
}

impl FoldPlan {
    pub fn label(&self) -> String {
        self.held_out_session.to_string()
    }
}

/// One plan per session in the manifest. Each session must have exactly two
/// speakers; the lexicographically first validates, the other tests.
pub fn make_fold_plans(manifest: &CorpusManifest) -> Result<Vec<FoldPlan>, TrainError> {
    let mut plans = Vec::new();
    for session in manifest.sessions() {
        let speakers = manifest.speakers_in_session(session);
        if speakers.len() != 2 {
            return Err(TrainError::InsufficientSpeakers {
                session,
                count: speakers.len(),
            });
        }
        let mut it = speakers.into_iter();
        plans.push(FoldPlan {
            held_out_session: session,
            val_speaker: it.next().unwrap(),
            test_speaker: it.next().unwrap(),
        });
    }
    Ok(plans)
}

/// Splits the corpus for one fold: training data is every other session in
/// full; the held-out session divides by speaker into validation and test.
pub fn split_for_fold(
    manifest: &CorpusManifest,
    plan: &FoldPlan,
) -> (Vec<DatasetEntry>, Vec<DatasetEntry>, Vec<DatasetEntry>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.entries {
        if e.session != plan.held_out_session {
            train.push(e.clone());
        } else if e.speaker == plan.val_speaker {
            val.push(e.clone());
        } else {
            test.push(e.clone());
        }
    }
    (train, val, test)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Early-stopping patience in epochs without validation improvement;
    /// `None` disables early stopping and best-model restoration.
    pub patience: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> TrainOptions {
        TrainOptions {
            epochs: 300,
            batch_size: 16,
            seed: 0,
            patience: Some(10),
        }
    }
}

/// Per-epoch loss means (sample-weighted over batches). Absent terms stay
/// `None` for the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub total: f64,
    pub softmax: f64,
    pub center: Option<f64>,
    pub recon: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub curve: Vec<CurvePoint>,
    /// Every clip path that entered a training batch; the leakage audit
    /// intersects this with the evaluation sets.
    pub seen_paths: BTreeSet<String>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
}

/// Accuracy metrics over (true, predicted) label pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Fraction of correct predictions.
    pub overall: f64,
    /// Mean per-class recall over classes that appear in the data.
    pub class_mean: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; EmotionClass::COUNT]; EmotionClass::COUNT],
    pub total: usize,
}

pub fn compute_metrics(pairs: &[(usize, usize)]) -> Result<Metrics, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::InvalidOptions("no samples to score".into()));
    }
    let c = EmotionClass::COUNT;
    let mut confusion = [[0usize; EmotionClass::COUNT]; EmotionClass::COUNT];
    for &(t, p) in pairs {
        if t >= c || p >= c {
            return Err(TrainError::InvalidOptions(format!(
                "label pair ({t}, {p}) out of range"
            )));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let overall = correct as f64 / pairs.len() as f64;
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    for t in 0..c {
        let row: usize = confusion[t].iter().sum();
        if row > 0 {
            recall_sum += confusion[t][t] as f64 / row as f64;
            present += 1;
        }
    }
    Ok(Metrics {
        overall,
        class_mean: recall_sum / present as f64,
        confusion,
        total: pairs.len(),
    })
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: Metrics,
    /// Mean squared reconstruction error over all elements, for variants
    /// with a decoder.
    pub recon_mse: Option<f64>,
}

fn features_for<'a>(
    entries: &[DatasetEntry],
    features: &'a FeatureStore,
) -> Result<Vec<&'a FeatureMatrix>, TrainError> {
    entries
        .iter()
        .map(|e| {
            features
                .get(&e.clip_path)
                .ok_or_else(|| DspError::MissingFeature(e.clip_path.clone()).into())
        })
        .collect()
}

/// Scores `model` on `entries` in inference mode, batching by [`EVAL_BATCH`].
pub fn evaluate(
    model: &Model,
    entries: &[DatasetEntry],
    features: &FeatureStore,
) -> Result<EvalReport, TrainError> {
    if entries.is_empty() {
        return Err(TrainError::InvalidOptions("no samples to score".into()));
    }
    let mats = features_for(entries, features)?;
    let mut pairs = Vec::with_capacity(entries.len());
    let mut sq_err = 0.0f64;
    let mut elems = 0usize;
    let wants_recon = model.config().variant.has_decoder();
    for (chunk_e, chunk_m) in entries.chunks(EVAL_BATCH).zip(mats.chunks(EVAL_BATCH)) {
        let fwd = model.forward_eval(chunk_m)?;
        let logits = fwd.graph.values(fwd.logits);
        let c = EmotionClass::COUNT;
        for (r, e) in chunk_e.iter().enumerate() {
            let row = &logits[r * c..(r + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            pairs.push((e.label.index(), best));
        }
        if wants_recon {
            let recon = fwd.reconstruction.expect("decoder variant");
            let rv = fwd.graph.values(recon);
            for (r, t) in rv.iter().zip(&fwd.input_flat) {
                let d = r - t;
                sq_err += d * d;
            }
            elems += rv.len();
        }
    }
    Ok(EvalReport {
        metrics: compute_metrics(&pairs)?,
        recon_mse: wants_recon.then(|| sq_err / elems as f64),
    })
}

/// Runs the epoch loop on `model` in place. With a validation set and a
/// patience, watches validation class accuracy and restores the best
/// snapshot; otherwise trains for the full epoch budget.
pub fn train_model(
    model: &mut Model,
    train: &[DatasetEntry],
    val: Option<&[DatasetEntry]>,
    features: &FeatureStore,
    opts: &TrainOptions,
) -> Result<TrainLog, TrainError> {
    if opts.epochs == 0 {
        return Err(TrainError::InvalidOptions("epochs must be >= 1".into()));
    }
    if opts.batch_size < 2 {
        return Err(TrainError::InvalidOptions("batch_size must be >= 2".into()));
    }
    if train.len() < 2 {
        return Err(TrainError::EmptyTrainingSet(train.len()));
    }
    let train_mats = features_for(train, features)?;
    if let Some(v) = val {
        features_for(v, features)?;
    }

    let mut streams = DropoutStreams::new(opts.seed);
    let mut shuffle_rng = derive_rng(opts.seed, "shuffle");
    let mut opt = AdadeltaState::new();
    let mut log = TrainLog {
        curve: Vec::with_capacity(opts.epochs),
        seen_paths: BTreeSet::new(),
        epochs_run: 0,
        stopped_early: false,
        best_epoch: None,
        best_val_acc: None,
    };
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_improvement = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=opts.epochs {
        // one shuffle stream across epochs, Fisher-Yates
        for i in (1..order.len()).rev() {
            use rand::Rng;
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut have = (false, false);
        let mut samples = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            if chunk.len() == 1 {
                continue; // batch statistics are undefined for one sample
            }
            let batch: Vec<&FeatureMatrix> = chunk.iter().map(|&i| train_mats[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label.index()).collect();
            for &i in chunk {
                log.seen_paths.insert(train[i].clip_path.clone());
            }
            let mut fwd = model.forward_train(&batch, &mut streams)?;
            let bundle = model.joint_loss(&mut fwd, &labels)?;
            fwd.graph.backward(bundle.tensor)?;
            let grads = fwd.param_grads();
            opt.step(model, &grads)?;

            let n = chunk.len() as f64;
            sums.0 += bundle.total * n;
            sums.1 += bundle.softmax * n;
            if let Some(cv) = bundle.center {
                sums.2 += cv * n;
                have.0 = true;
            }
            if let Some(rv) = bundle.recon {
                sums.3 += rv * n;
                have.1 = true;
            }
            samples += chunk.len();
        }
        if samples == 0 {
            return Err(TrainError::EmptyTrainingSet(train.len()));
        }
        let n = samples as f64;
        log.curve.push(CurvePoint {
            epoch,
            total: sums.0 / n,
            softmax: sums.1 / n,
            center: have.0.then(|| sums.2 / n),
            recon: have.1.then(|| sums.3 / n),
        });
        log.epochs_run = epoch;

        if let Some(val_entries) = val {
            let acc = evaluate(model, val_entries, features)?.metrics.class_mean;
            let improved = best.as_ref().map_or(true, |(b, _, _)| acc > *b);
            if improved {
                best = Some((acc, epoch, model.clone()));
                since_improvement = 0;
            } else {
                since_improvement += 1;
            }
            if let Some(patience) = opts.patience {
                if since_improvement >= patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }

    if opts.patience.is_some() {
        if let Some((acc, epoch, snapshot)) = best {
            *model = snapshot;
            log.best_epoch = Some(epoch);
            log.best_val_acc = Some(acc);
        }
    } else if let Some((acc, epoch, _)) = best {
        // keep the final model but still report where the best was
        log.best_epoch = Some(epoch);
        log.best_val_acc = Some(acc);
    }
    Ok(log)
}

/// Outcome of training and testing one fold.
#[derive(Debug)]
pub struct FitOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub test: EvalReport,
    pub plan: FoldPlan,
}

/// Builds a fresh model and trains it on one fold's split, then scores the
/// held-out test speaker.
pub fn fit(
    config: &ModelConfig,
    manifest: &CorpusManifest,
    features: &FeatureStore,
    plan: &FoldPlan,
    opts: &TrainOptions,
) -> Result<FitOutcome, TrainError> {
    let (train, val, test) = split_for_fold(manifest, plan);
    if test.is_empty() || val.is_empty() {
        return Err(TrainError::InvalidOptions(format!(
            "fold {} has an empty validation or test set",
            plan.held_out_session
        )));
    }
    let mut model = Model::build(config.clone(), opts.seed)?;
    let log = train_model(&mut model, &train, Some(&val), features, opts)?;
    let test_report = evaluate(&model, &test, features)?;
    Ok(FitOutcome {
        model,
        log,
        test: test_report,
        plan: plan.clone(),
    })
}

/// Per-fold test summary plus the cross-fold mean.
#[derive(Debug, Clone)]
pub struct FoldSummary {
    pub fold: String,
    pub overall: f64,
    pub class_mean: f64,
    pub recon_mse: Option<f64>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub folds: Vec<FoldSummary>,
    pub mean_overall: f64,
    pub mean_class: f64,
    pub mean_recon: Option<f64>,
}

pub fn summarize_fold(outcome: &FitOutcome) -> FoldSummary {
    FoldSummary {
        fold: outcome.plan.label(),
        overall: outcome.test.metrics.overall,
        class_mean: outcome.test.metrics.class_mean,
        recon_mse: outcome.test.recon_mse,
        epochs_run: outcome.log.epochs_run,
        best_epoch: outcome.log.best_epoch,
    }
}

/// Aggregates fold summaries into a report with unweighted means.
pub fn assemble_cv_report(folds: Vec<FoldSummary>) -> Result<CvReport, TrainError> {
    if folds.is_empty() {
        return Err(TrainError::InvalidOptions("no folds to aggregate".into()));
    }
    let n = folds.len() as f64;
    let mean_overall = folds.iter().map(|f| f.overall).sum::<f64>() / n;
    let mean_class = folds.iter().map(|f| f.class_mean).sum::<f64>() / n;
    let mean_recon = if folds.iter().all(|f| f.recon_mse.is_some()) {
        Some(folds.iter().map(|f| f.recon_mse.unwrap()).sum::<f64>() / n)
    } else {
        None
    };
    Ok(CvReport {
        folds,
        mean_overall,
        mean_class,
        mean_recon,
    })
}

/// Trains every fold in sequence with per-fold seeds derived from
/// `opts.seed`, so fold results do not depend on fold execution order.
pub fn cross_validate(
    config: &ModelConfig,
    manifest: &CorpusManifest,
    features: &FeatureStore,
    opts: &TrainOptions,
) -> Result<(CvReport, Vec<FitOutcome>), TrainError> {
    let plans = make_fold_plans(manifest)?;
    let mut outcomes = Vec::with_capacity(plans.len());
    for plan in &plans {
        let fold_opts = TrainOptions {
            seed: fold_seed(opts.seed, plan.held_out_session),
            ..opts.clone()
        };
        outcomes.push(fit(config, manifest, features, plan, &fold_opts)?);
    }
    let report = assemble_cv_report(outcomes.iter().map(summarize_fold).collect())?;
    Ok((report, outcomes))
}

/// Seed for one fold's model init, shuffling and dropout.
pub fn fold_seed(seed: u64, held_out_session: usize) -> u64 {
    derive_seed(seed, &format!("fold/{held_out_session}"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row of the metrics table.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub variant: String,
    pub input: String,
    pub fold: String,
    pub overall: f64,
    pub class_mean: f64,
    pub recon_mse: Option<f64>,
}

/// Writes `variant,input,fold,overall_acc,class_acc,recon_mse` rows; the
/// reconstruction column is empty for variants without a decoder.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), TrainError> {
    let mut out = String::from("variant,input,fold,overall_acc,class_acc,recon_mse\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            r.variant,
            r.input,
            r.fold,
            r.overall,
            r.class_mean,
            fmt_opt(r.recon_mse)
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes `epoch,loss_total,loss_softmax,loss_center,loss_mse` rows with
/// empty fields for loss terms the variant does not produce.
pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,loss_total,loss_softmax,loss_center,loss_mse\n");
    for p in curve {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            p.epoch,
            p.total,
            p.softmax,
            fmt_opt(p.center),
            fmt_opt(p.recon)
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}
