//! Embedding analysis: export, exact t-SNE projection to 2-D, and a scalar
//! compaction measure of how tightly classes cluster.
//!
//! The t-SNE here is the exact O(n^2) algorithm: per-point bandwidths from a
//! binary search on entropy, early exaggeration, and gradient descent with
//! per-coordinate gains and a momentum switch. It is meant for corpus-sized
//! embedding sets (hundreds of points), not millions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::audio::{DatasetEntry, EmotionClass};
use crate::dsp::FeatureStore;
use crate::model::{Model, ModelError};
use crate::rng::derive_rng;
use crate::train::{self, TrainError};

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("class {0} has no samples")]
    EmptyClass(EmotionClass),
    #[error("perplexity {perplexity} too large for {n} points, need n >= 3*perplexity + 1")]
    PerplexityTooLarge { n: usize, perplexity: f64 },
    #[error("degenerate class layout: {0}")]
    DegenerateClass(String),
    #[error("variant {0} has no decoder, nothing to reconstruct")]
    VariantLacksDecoder(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed embeddings csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Labeled embedding vectors, row-major `[n, dim]`.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub labels: Vec<EmotionClass>,
    pub points: Vec<f64>,
    /// Clip path each row came from; empty when loaded from a CSV.
    pub source_paths: Vec<String>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Embeds `entries` with the trained model. With `per_class = Some(k)`, takes
/// a seeded sample of at most `k` clips per class and fails if any class has
/// none; with `None`, embeds everything.
pub fn export_embeddings(
    model: &Model,
    entries: &[DatasetEntry],
    features: &FeatureStore,
    per_class: Option<usize>,
    seed: u64,
) -> Result<EmbeddingSet, AnalyzeError> {
    if entries.is_empty() {
        return Err(AnalyzeError::InvalidInput("no entries to embed".into()));
    }
    let chosen: Vec<&DatasetEntry> = match per_class {
        None => entries.iter().collect(),
        Some(k) => {
            if k == 0 {
                return Err(AnalyzeError::InvalidInput("per_class must be >= 1".into()));
            }
            let mut chosen = Vec::new();
            for class in EmotionClass::ALL {
                let mut pool: Vec<&DatasetEntry> =
                    entries.iter().filter(|e| e.label == class).collect();
                if pool.is_empty() {
                    return Err(AnalyzeError::EmptyClass(class));
                }
                let mut rng = derive_rng(seed, &format!("sample/{}", class.as_str()));
                // partial Fisher-Yates: the first k slots become the sample
                let take = k.min(pool.len());
                for i in 0..take {
                    let j = rng.gen_range(i..pool.len());
                    pool.swap(i, j);
                }
                chosen.extend(pool.into_iter().take(take));
            }
            chosen
        }
    };

    let dim = model.config().fc_width;
    let mut set = EmbeddingSet {
        dim,
        labels: Vec::with_capacity(chosen.len()),
        points: Vec::with_capacity(chosen.len() * dim),
        source_paths: Vec::with_capacity(chosen.len()),
    };
    for chunk in chosen.chunks(train::EVAL_BATCH) {
        let mats = chunk
            .iter()
            .map(|e| {
                features
                    .get(&e.clip_path)
                    .ok_or_else(|| crate::dsp::DspError::MissingFeature(e.clip_path.clone()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(TrainError::from)?;
        for (e, row) in chunk.iter().zip(model.embed(&mats)?) {
            set.labels.push(e.label);
            set.points.extend(row);
            set.source_paths.push(e.clip_path.clone());
        }
    }
    Ok(set)
}

#[derive(Debug, Clone)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iters: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch_iter: usize,
    pub seed: u64,
}

impl Default for TsneOptions {
    fn default() -> TsneOptions {
        TsneOptions {
            perplexity: 30.0,
            iters: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch_iter: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// Row-major `[n, 2]`.
    pub coords: Vec<f64>,
    /// KL(P || Q) each iteration, always against the un-exaggerated P.
    pub kl_trace: Vec<f64>,
}

const P_FLOOR: f64 = 1e-12;
const GAIN_MIN: f64 = 0.01;

fn squared_distances(points: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..dim {
                let diff = points[i * dim + k] - points[j * dim + k];
                s += diff * diff;
            }
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional distribution row for point `i` at precision `beta`, returning
/// the Shannon entropy in nats.
fn p_row(d2: &[f64], i: usize, n: usize, beta: f64, out: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    for j in 0..n {
        let v = if j == i { 0.0 } else { (-beta * d2[i * n + j]).exp() };
        out[j] = v;
        sum += v;
    }
    if sum <= 0.0 {
        for v in out.iter_mut() {
            *v = 0.0;
        }
        return 0.0;
    }
    let mut entropy = 0.0;
    for (j, v) in out.iter_mut().enumerate() {
        *v /= sum;
        if *v > 0.0 {
            entropy += beta * d2[i * n + j] * *v;
        }
    }
    entropy + sum.ln()
}

/// Symmetric joint P with per-point bandwidths matched to `perplexity` by a
/// 50-step binary search on entropy.
fn joint_p(d2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let mut beta = 1.0;
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for _ in 0..50 {
            let entropy = p_row(d2, i, n, beta, &mut row);
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        p_row(d2, i, n, beta, &mut row);
        cond[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64))
                    .max(P_FLOOR);
            }
        }
    }
    p
}

/// Exact t-SNE to 2-D.
pub fn tsne2d(set: &EmbeddingSet, opts: &TsneOptions) -> Result<TsneResult, AnalyzeError> {
    let n = set.len();
    if !(opts.perplexity.is_finite() && opts.perplexity >= 1.0) {
        return Err(AnalyzeError::InvalidInput("perplexity must be >= 1".into()));
    }
    if opts.iters == 0 {
        return Err(AnalyzeError::InvalidInput("iters must be >= 1".into()));
    }
    if (n as f64) < 3.0 * opts.perplexity + 1.0 {
        return Err(AnalyzeError::PerplexityTooLarge {
            n,
            perplexity: opts.perplexity,
        });
    }

    let p = joint_p(&squared_distances(&set.points, n, set.dim), n, opts.perplexity);

    let mut rng = derive_rng(opts.seed, "tsne");
    let mut y: Vec<f64> = (0..2 * n)
        .map(|_| 1e-4 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut inc = vec![0.0; 2 * n];
    let mut gains: Vec<f64> = vec![1.0; 2 * n];
    let mut grad = vec![0.0; 2 * n];
    let mut q = vec![0.0; n * n];
    let mut kl_trace = Vec::with_capacity(opts.iters);

    for iter in 0..opts.iters {
        let exag = if iter < opts.exaggeration_iters {
            opts.exaggeration
        } else {
            1.0
        };
        let momentum = if iter < opts.momentum_switch_iter {
            opts.momentum_initial
        } else {
            opts.momentum_final
        };

        // Student-t similarities in the plane
        let mut qsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = w;
                q[j * n + i] = w;
                qsum += 2.0 * w;
            }
            q[i * n + i] = 0.0;
        }

        grad.fill(0.0);
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let qij = (w / qsum).max(P_FLOOR);
                let pij = p[i * n + j];
                kl += pij * (pij / qij).ln();
                let coeff = 4.0 * (exag * pij - qij) * w;
                grad[2 * i] += coeff * (y[2 * i] - y[2 * j]);
                grad[2 * i + 1] += coeff * (y[2 * i + 1] - y[2 * j + 1]);
            }
        }
        kl_trace.push(kl);

        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (inc[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(GAIN_MIN)
            };
            inc[k] = momentum * inc[k] - opts.learning_rate * gains[k] * grad[k];
            y[k] += inc[k];
        }
        // keep the embedding centered
        let (mx, my) = (0..n).fold((0.0, 0.0), |(a, b), i| (a + y[2 * i], b + y[2 * i + 1]));
        let (mx, my) = (mx / n as f64, my / n as f64);
        for i in 0..n {
            y[2 * i] -= mx;
            y[2 * i + 1] -= my;
        }
    }

    Ok(TsneResult {
        coords: y,
        kl_trace,
    })
}

/// Mean distance of points to their own class centroid, divided by the mean
/// pairwise distance between class centroids. Smaller means tighter classes.
pub fn compaction_ratio(set: &EmbeddingSet) -> Result<f64, AnalyzeError> {
    if set.is_empty() {
        return Err(AnalyzeError::InvalidInput("no points".into()));
    }
    let dim = set.dim;
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, label) in set.labels.iter().enumerate() {
        let (sum, count) = sums
            .entry(label.index())
            .or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in sum.iter_mut().zip(set.row(i)) {
            *s += v;
        }
        *count += 1;
    }
    if sums.len() < 2 {
        return Err(AnalyzeError::DegenerateClass(
            "need at least two classes for centroid spread".into(),
        ));
    }
    let centroids: BTreeMap<usize, Vec<f64>> = sums
        .into_iter()
        .map(|(c, (sum, count))| (c, sum.iter().map(|s| s / count as f64).collect()))
        .collect();

    let mut intra = 0.0;
    for (i, label) in set.labels.iter().enumerate() {
        let c = &centroids[&label.index()];
        let d2: f64 = set
            .row(i)
            .iter()
            .zip(c)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        intra += d2.sqrt();
    }
    intra /= set.len() as f64;

    let keys: Vec<usize> = centroids.keys().copied().collect();
    let mut spread = 0.0;
    let mut pairs = 0usize;
    for (ai, &a) in keys.iter().enumerate() {
        for &b in &keys[ai + 1..] {
            let d2: f64 = centroids[&a]
                .iter()
                .zip(&centroids[&b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            spread += d2.sqrt();
            pairs += 1;
        }
    }
    spread /= pairs as f64;
    if spread <= 0.0 {
        return Err(AnalyzeError::DegenerateClass(
            "class centroids coincide".into(),
        ));
    }
    Ok(intra / spread)
}

/// Mean squared reconstruction error of a decoder variant over `entries`.
pub fn reconstruction_mse(
    model: &Model,
    entries: &[DatasetEntry],
    features: &FeatureStore,
) -> Result<f64, AnalyzeError> {
    if !model.config().variant.has_decoder() {
        return Err(AnalyzeError::VariantLacksDecoder(
            model.config().variant.to_string(),
        ));
    }
    let report = train::evaluate(model, entries, features)?;
    Ok(report.recon_mse.expect("decoder variant reports mse"))
}

#[derive(Debug, Clone)]
pub struct ReconRow {
    pub variant: String,
    pub input: String,
    pub mse: f64,
}

pub fn write_recon_csv(path: &Path, rows: &[ReconRow]) -> Result<(), AnalyzeError> {
    let mut out = String::from("variant,input,mse\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6}", r.variant, r.input, r.mse);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes `label,e0,..,e{dim-1}` with full round-trip float formatting.
pub fn write_embeddings_csv(path: &Path, set: &EmbeddingSet) -> Result<(), AnalyzeError> {
    let mut out = String::from("label");
    for k in 0..set.dim {
        let _ = write!(out, ",e{k}");
    }
    out.push('\n');
    for (i, label) in set.labels.iter().enumerate() {
        out.push_str(label.as_str());
        for v in set.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_embeddings_csv(path: &Path) -> Result<EmbeddingSet, AnalyzeError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| AnalyzeError::Csv("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "label" {
        return Err(AnalyzeError::Csv("expected header label,e0,..".into()));
    }
    let dim = cols.len() - 1;
    for (k, c) in cols[1..].iter().enumerate() {
        if *c != format!("e{k}") {
            return Err(AnalyzeError::Csv(format!("unexpected column {c}")));
        }
    }
    let mut set = EmbeddingSet {
        dim,
        labels: Vec::new(),
        points: Vec::new(),
        source_paths: Vec::new(),
    };
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(AnalyzeError::Csv(format!(
                "line {}: {} fields, expected {}",
                lineno + 2,
                fields.len(),
                dim + 1
            )));
        }
        let label: EmotionClass = fields[0]
            .parse()
            .map_err(|_| AnalyzeError::Csv(format!("line {}: bad label {}", lineno + 2, fields[0])))?;
        set.labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| AnalyzeError::Csv(format!("line {}: bad float {f}", lineno + 2)))?;
            if !v.is_finite() {
                return Err(AnalyzeError::Csv(format!("line {}: non-finite value", lineno + 2)));
            }
            set.points.push(v);
        }
    }
    if set.is_empty() {
        return Err(AnalyzeError::Csv("no data rows".into()));
    }
    Ok(set)
}

/// Writes `label,x,y` rows for a 2-D projection.
pub fn write_tsne_csv(
    path: &Path,
    labels: &[EmotionClass],
    coords: &[f64],
) -> Result<(), AnalyzeError> {
    if coords.len() != 2 * labels.len() {
        return Err(AnalyzeError::InvalidInput(format!(
            "{} coords for {} labels",
            coords.len(),
            labels.len()
        )));
    }
    let mut out = String::from("label,x,y\n");
    for (i, label) in labels.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", label.as_str(), coords[2 * i], coords[2 * i + 1]);
    }
    std::fs::write(path, out)?;
    Ok(())
}
