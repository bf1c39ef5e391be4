//! The parallel-convolution emotion classifier and its training variants.
//!
//! Four convolution paths with different kernel shapes run side by side over
//! the same single-channel input; each is relu-activated and max-pooled down
//! to a 2x2 map per kernel. The pooled maps concatenate into one vector that
//! feeds a linear embedding layer (batch norm, relu, dropout), and a 4-way
//! softmax head classifies the embedding.
//!
//! Variants stack auxiliary supervision on the shared trunk:
//!
//! * `s`     softmax cross-entropy only
//! * `s+a`   adds a decoder that reconstructs the input from the concat
//!           vector, trained with mean squared error
//! * `s+c`   adds a center loss pulling embeddings toward their class center
//! * `s+a+c` both
//!
//! Class centers are ordinary parameters updated by the same optimizer as
//! everything else. Auxiliary terms with a zero weight are left out of the
//! tape entirely, so a weight of zero is exactly equivalent to the smaller
//! variant, parameter update for parameter update.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::EmotionClass;
use crate::autograd::{AutogradError, Graph, GradCheckReport, Tensor};
use crate::dsp::{FeatureKind, FeatureMatrix};
use crate::rng::derive_rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
const PATHS: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape contract violated: {0}")]
    ShapeContract(String),
    #[error("bad batch: {0}")]
    BatchShape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which loss terms train the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "s")]
    Softmax,
    #[serde(rename = "s+a")]
    SoftmaxRecon,
    #[serde(rename = "s+c")]
    SoftmaxCenter,
    #[serde(rename = "s+a+c")]
    SoftmaxReconCenter,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Softmax,
        Variant::SoftmaxRecon,
        Variant::SoftmaxCenter,
        Variant::SoftmaxReconCenter,
    ];

    pub fn has_decoder(self) -> bool {
        matches!(self, Variant::SoftmaxRecon | Variant::SoftmaxReconCenter)
    }

    pub fn has_centers(self) -> bool {
        matches!(self, Variant::SoftmaxCenter | Variant::SoftmaxReconCenter)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Softmax => "s",
            Variant::SoftmaxRecon => "s+a",
            Variant::SoftmaxCenter => "s+c",
            Variant::SoftmaxReconCenter => "s+a+c",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s" => Ok(Variant::Softmax),
            "s+a" => Ok(Variant::SoftmaxRecon),
            "s+c" => Ok(Variant::SoftmaxCenter),
            "s+a+c" => Ok(Variant::SoftmaxReconCenter),
            other => Err(ModelError::InvalidConfig(format!(
                "unknown variant {other:?} (expected s, s+a, s+c or s+a+c)"
            ))),
        }
    }
}

/// Distance used by the center penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CenterMetric {
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "l1")]
    L1,
}

impl std::str::FromStr for CenterMetric {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l2" => Ok(CenterMetric::L2),
            "l1" => Ok(CenterMetric::L1),
            other => Err(ModelError::InvalidConfig(format!(
                "unknown center metric {other:?} (expected l2 or l1)"
            ))),
        }
    }
}

fn default_kernel_sizes() -> [(usize, usize); PATHS] {
    [(4, 6), (6, 8), (8, 10), (10, 12)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input: FeatureKind,
    pub variant: Variant,
    pub kernels_per_path: usize,
    pub kernel_sizes: [(usize, usize); PATHS],
    pub fc_width: usize,
    pub dropout: f64,
    pub lambda_center: f64,
    pub lambda_recon: f64,
    pub center_metric: CenterMetric,
    pub decoder_hidden: Vec<usize>,
    /// Overrides the input dimensions implied by `input`. Intended for
    /// desk-scale tests (tiny gradient checks); the CLI never sets it.
    pub custom_input_dims: Option<(usize, usize)>,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            input: FeatureKind::Mfcc,
            variant: Variant::SoftmaxReconCenter,
            kernels_per_path: 200,
            kernel_sizes: default_kernel_sizes(),
            fc_width: 64,
            dropout: 0.5,
            lambda_center: 4.0,
            lambda_recon: 1.0,
            center_metric: CenterMetric::L2,
            decoder_hidden: vec![256],
            custom_input_dims: None,
        }
    }
}

impl ModelConfig {
    pub fn input_dims(&self) -> (usize, usize) {
        self.custom_input_dims
            .unwrap_or_else(|| self.input.canonical_dims())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.kernels_per_path == 0 {
            return Err(ModelError::InvalidConfig("kernels_per_path must be >= 1".into()));
        }
        if self.fc_width == 0 {
            return Err(ModelError::InvalidConfig("fc_width must be >= 1".into()));
        }
        if !(0.25..=0.75).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} outside [0.25, 0.75]",
                self.dropout
            )));
        }
        if self.lambda_center < 0.0 || !self.lambda_center.is_finite() {
            return Err(ModelError::InvalidConfig("lambda_center must be >= 0".into()));
        }
        if self.lambda_recon < 0.0 || !self.lambda_recon.is_finite() {
            return Err(ModelError::InvalidConfig("lambda_recon must be >= 0".into()));
        }
        if self.variant.has_decoder() && self.decoder_hidden.iter().any(|h| *h == 0) {
            return Err(ModelError::InvalidConfig("decoder_hidden sizes must be >= 1".into()));
        }
        let (h, w) = self.input_dims();
        if h == 0 || w == 0 {
            return Err(ModelError::InvalidConfig("input dims must be >= 1".into()));
        }
        self.dims().map(|_| ())
    }

    /// Per-path spatial dimensions; fails if any pooled map is not 2x2.
    pub fn dims(&self) -> Result<ModelDims, ModelError> {
        let (h, w) = self.input_dims();
        let mut conv = [(0usize, 0usize); PATHS];
        let mut pool = [(0usize, 0usize); PATHS];
        for (i, &(kh, kw)) in self.kernel_sizes.iter().enumerate() {
            if kh == 0 || kw == 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "kernel size {kh}x{kw} in path {i}"
                )));
            }
            if kh > h || kw > w {
                return Err(ModelError::InvalidConfig(format!(
                    "kernel {kh}x{kw} exceeds input {h}x{w} in path {i}"
                )));
            }
            let (ch, cw) = (h - kh + 1, w - kw + 1);
            let (ph, pw) = (ch / 2, cw / 2);
            if ph == 0 || pw == 0 {
                return Err(ModelError::ShapeContract(format!(
                    "path {i}: conv output {ch}x{cw} too small to pool"
                )));
            }
            // Halving windows must tile the conv output into exactly 2x2.
            if ch / ph != 2 || cw / pw != 2 {
                return Err(ModelError::ShapeContract(format!(
                    "path {i}: conv output {ch}x{cw} pools to {}x{}, need 2x2",
                    ch / ph,
                    cw / pw
                )));
            }
            conv[i] = (ch, cw);
            pool[i] = (ph, pw);
        }
        Ok(ModelDims {
            input: (h, w),
            conv,
            pool,
            concat_width: PATHS * self.kernels_per_path * 4,
        })
    }
}

/// Spatial bookkeeping for one configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub input: (usize, usize),
    pub conv: [(usize, usize); PATHS],
    pub pool: [(usize, usize); PATHS],
    pub concat_width: usize,
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Running batch-norm statistics for one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStat {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStat {
    fn fresh(width: usize) -> RunningStat {
        RunningStat {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

/// Dropout noise sources, one stream per dropout layer so that adding or
/// removing the decoder never perturbs the classifier's masks.
pub struct DropoutStreams {
    pub classifier: rand_chacha::ChaCha8Rng,
    pub decoder: rand_chacha::ChaCha8Rng,
}

impl DropoutStreams {
    pub fn new(seed: u64) -> DropoutStreams {
        DropoutStreams {
            classifier: derive_rng(seed, "dropout/cls"),
            decoder: derive_rng(seed, "dropout/dec"),
        }
    }
}

/// One recorded forward pass over a batch.
pub struct Forward {
    pub graph: Graph,
    pub concat: Tensor,
    pub embedding: Tensor,
    pub logits: Tensor,
    pub reconstruction: Option<Tensor>,
    /// Tape ids of every model parameter, for gradient collection.
    pub param_ids: BTreeMap<String, Tensor>,
    /// Flattened input batch, the reconstruction target.
    pub input_flat: Vec<f64>,
    pub batch_size: usize,
}

impl Forward {
    /// Gradients per parameter name; call after `graph.backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.param_ids
            .iter()
            .map(|(name, t)| {
                let g = self
                    .graph
                    .grad(*t)
                    .expect("backward has not run")
                    .to_vec();
                (name.clone(), g)
            })
            .collect()
    }
}

/// Scalar loss values of one batch; `tensor` is the joint loss node for
/// backprop. Terms absent from the tape are `None`.
pub struct LossBundle {
    pub tensor: Tensor,
    pub total: f64,
    pub softmax: f64,
    pub center: Option<f64>,
    pub recon: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    dims: ModelDims,
    params: BTreeMap<String, Param>,
    norm: BTreeMap<String, RunningStat>,
}

enum Mode<'a> {
    Train {
        norm: &'a mut BTreeMap<String, RunningStat>,
        streams: &'a mut DropoutStreams,
        dropout: f64,
    },
    Eval {
        norm: &'a BTreeMap<String, RunningStat>,
    },
}

impl Model {
    /// Builds a model with deterministic per-parameter initialization:
    /// weights are uniform in +-sqrt(6/(fan_in+fan_out)) drawn from a stream
    /// derived from (seed, parameter name), biases and centers start at
    /// zero, batch-norm scale at one. Because every parameter has its own
    /// stream, configs that share a parameter initialize it identically no
    /// matter what else they contain.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let dims = config.dims()?;
        let mut params = BTreeMap::new();
        let mut norm = BTreeMap::new();

        let glorot = |name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize| {
            let mut rng = derive_rng(seed, &format!("init/{name}"));
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = shape.iter().product();
            let values = (0..n)
                .map(|_| {
                    use rand::Rng;
                    rng.gen::<f64>() * 2.0 * bound - bound
                })
                .collect();
            (name.to_string(), Param { shape, values })
        };
        let zeros = |name: &str, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            (
                name.to_string(),
                Param {
                    shape,
                    values: vec![0.0; n],
                },
            )
        };
        let ones = |name: &str, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            (
                name.to_string(),
                Param {
                    shape,
                    values: vec![1.0; n],
                },
            )
        };

        let k = config.kernels_per_path;
        for (i, &(kh, kw)) in config.kernel_sizes.iter().enumerate() {
            let (n, p) = glorot(
                &format!("path{i}/w"),
                vec![k, kh, kw],
                kh * kw,
                k * kh * kw,
            );
            params.insert(n, p);
            let (n, p) = zeros(&format!("path{i}/b"), vec![k]);
            params.insert(n, p);
        }
        let cw = dims.concat_width;
        let fc = config.fc_width;
        for (n, p) in [
            glorot("cls/fc/w", vec![fc, cw], cw, fc),
            zeros("cls/fc/b", vec![fc]),
            ones("cls/bn/gamma", vec![fc]),
            zeros("cls/bn/beta", vec![fc]),
            glorot("head/w", vec![EmotionClass::COUNT, fc], fc, EmotionClass::COUNT),
            zeros("head/b", vec![EmotionClass::COUNT]),
        ] {
            params.insert(n, p);
        }
        norm.insert("cls/bn".to_string(), RunningStat::fresh(fc));

        if config.variant.has_decoder() {
            let (h, w) = dims.input;
            for (n, p) in [
                glorot("dec/fc/w", vec![fc, cw], cw, fc),
                zeros("dec/fc/b", vec![fc]),
                ones("dec/bn/gamma", vec![fc]),
                zeros("dec/bn/beta", vec![fc]),
            ] {
                params.insert(n, p);
            }
            let mut prev = fc;
            for (i, &width) in config.decoder_hidden.iter().enumerate() {
                let (n, p) = glorot(&format!("dec/hidden{i}/w"), vec![width, prev], prev, width);
                params.insert(n, p);
                let (n, p) = zeros(&format!("dec/hidden{i}/b"), vec![width]);
                params.insert(n, p);
                prev = width;
            }
            let out = h * w;
            let (n, p) = glorot("dec/out/w", vec![out, prev], prev, out);
            params.insert(n, p);
            let (n, p) = zeros("dec/out/b", vec![out]);
            params.insert(n, p);
            norm.insert("dec/bn".to_string(), RunningStat::fresh(fc));
        }
        if config.variant.has_centers() {
            let (n, p) = zeros("centers", vec![EmotionClass::COUNT, fc]);
            params.insert(n, p);
        }

        Ok(Model {
            config,
            dims,
            params,
            norm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn running_stats(&self) -> &BTreeMap<String, RunningStat> {
        &self.norm
    }

    /// Applies an in-place update to one parameter (used by the optimizer).
    pub fn param_values_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.params.get_mut(name).map(|p| &mut p.values)
    }

    /// Size of the classification network: convolution paths, embedding
    /// layer, batch-norm affine terms and the softmax head. The decoder and
    /// class centers only exist at training time and are not counted, nor
    /// are batch-norm running statistics.
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| !name.starts_with("dec/") && *name != "centers")
            .map(|(_, p)| p.values.len())
            .sum()
    }

    /// Training-mode forward pass: batch statistics feed the normalization
    /// (and update the running estimates), dropout is live.
    pub fn forward_train(
        &mut self,
        batch: &[&FeatureMatrix],
        streams: &mut DropoutStreams,
    ) -> Result<Forward, ModelError> {
        let dropout = self.config.dropout;
        // split borrows: config/params are read, norm is written
        let (config, dims, params, norm) = (
            &self.config,
            &self.dims,
            &self.params,
            &mut self.norm,
        );
        forward_impl(
            config,
            dims,
            params,
            batch,
            Mode::Train {
                norm,
                streams,
                dropout,
            },
        )
    }

    /// Inference-mode forward pass: running statistics, no dropout.
    pub fn forward_eval(&self, batch: &[&FeatureMatrix]) -> Result<Forward, ModelError> {
        forward_impl(
            &self.config,
            &self.dims,
            &self.params,
            batch,
            Mode::Eval { norm: &self.norm },
        )
    }

    /// Joint training loss for a recorded forward pass. Auxiliary terms
    /// join the tape only when the variant uses them and their weight is
    /// positive; a zero weight reproduces the smaller variant exactly.
    pub fn joint_loss(&self, fwd: &mut Forward, labels: &[usize]) -> Result<LossBundle, ModelError> {
        if labels.len() != fwd.batch_size {
            return Err(ModelError::BatchShape(format!(
                "{} labels for batch of {}",
                labels.len(),
                fwd.batch_size
            )));
        }
        let g = &mut fwd.graph;
        let xent = g.softmax_xent(fwd.logits, labels)?;
        let softmax = g.scalar_value(xent)?;
        let mut total = xent;
        let mut center = None;
        if self.config.variant.has_centers() && self.config.lambda_center > 0.0 {
            let centers = fwd.param_ids["centers"];
            let term = center_penalty(g, fwd.embedding, centers, labels, self.config.center_metric)?;
            center = Some(g.scalar_value(term)?);
            let weighted = g.scale(term, self.config.lambda_center)?;
            total = g.add(total, weighted)?;
        }
        let mut recon = None;
        if self.config.variant.has_decoder() && self.config.lambda_recon > 0.0 {
            let pred = fwd
                .reconstruction
                .expect("decoder variant always records a reconstruction");
            let term = g.mse(pred, &fwd.input_flat)?;
            recon = Some(g.scalar_value(term)?);
            let weighted = g.scale(term, self.config.lambda_recon)?;
            total = g.add(total, weighted)?;
        }
        Ok(LossBundle {
            tensor: total,
            total: g.scalar_value(total)?,
            softmax,
            center,
            recon,
        })
    }

    /// Class predictions; ties resolve to the lowest class index.
    pub fn predict(&self, batch: &[&FeatureMatrix]) -> Result<Vec<usize>, ModelError> {
        let fwd = self.forward_eval(batch)?;
        let logits = fwd.graph.values(fwd.logits);
        let c = EmotionClass::COUNT;
        Ok((0..batch.len())
            .map(|r| {
                let row = &logits[r * c..(r + 1) * c];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Embeddings in inference mode, one row per batch element.
    pub fn embed(&self, batch: &[&FeatureMatrix]) -> Result<Vec<Vec<f64>>, ModelError> {
        let fwd = self.forward_eval(batch)?;
        let e = fwd.graph.values(fwd.embedding);
        let w = self.config.fc_width;
        Ok((0..batch.len()).map(|r| e[r * w..(r + 1) * w].to_vec()).collect())
    }

    /// Serializes parameters and buffers next to a JSON sidecar holding the
    /// config. The sidecar is the checkpoint path with `.json` appended.
    pub fn save(&self, ckpt: &Path) -> Result<(), ModelError> {
        let mut entries: Vec<(String, &Param)> = self
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p))
            .collect();
        let stats: Vec<(String, Param)> = self
            .norm
            .iter()
            .flat_map(|(layer, rs)| {
                [
                    (
                        format!("buf/{layer}/mean"),
                        Param {
                            shape: vec![rs.mean.len()],
                            values: rs.mean.clone(),
                        },
                    ),
                    (
                        format!("buf/{layer}/var"),
                        Param {
                            shape: vec![rs.var.len()],
                            values: rs.var.clone(),
                        },
                    ),
                ]
            })
            .collect();
        entries.extend(stats.iter().map(|(n, p)| (n.clone(), p)));
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        write_serc(ckpt, &entries)?;
        let sidecar = sidecar_path(ckpt);
        fs::write(&sidecar, serde_json::to_vec_pretty(&self.config)?)?;
        Ok(())
    }

    /// Restores a model saved by [`Model::save`]. The parameter set must
    /// match the sidecar config exactly.
    pub fn load(ckpt: &Path) -> Result<Model, ModelError> {
        let sidecar = sidecar_path(ckpt);
        let config: ModelConfig = serde_json::from_slice(&fs::read(&sidecar)?)?;
        let mut model = Model::build(config, 0)?;
        let mut entries = read_serc(ckpt)?;
        for (name, param) in model.params.iter_mut() {
            let loaded = entries.remove(name).ok_or_else(|| {
                ModelError::Checkpoint(format!("missing parameter {name}"))
            })?;
            if loaded.shape != param.shape {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    loaded.shape, param.shape
                )));
            }
            param.values = loaded.values;
        }
        for (layer, rs) in model.norm.iter_mut() {
            for (field, dst) in [("mean", &mut rs.mean), ("var", &mut rs.var)] {
                let key = format!("buf/{layer}/{field}");
                let loaded = entries
                    .remove(&key)
                    .ok_or_else(|| ModelError::Checkpoint(format!("missing buffer {key}")))?;
                if loaded.values.len() != dst.len() {
                    return Err(ModelError::Checkpoint(format!(
                        "buffer {key} has {} values, expected {}",
                        loaded.values.len(),
                        dst.len()
                    )));
                }
                *dst = loaded.values;
            }
        }
        if let Some(extra) = entries.keys().next() {
            return Err(ModelError::Checkpoint(format!("unexpected entry {extra}")));
        }
        Ok(model)
    }
}

fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

/// Center penalty over a batch: for L2, half the summed squared distance of
/// each embedding to its class center; for L1, the summed absolute
/// distance. Differentiable in both the embeddings and the centers.
pub fn center_penalty(
    g: &mut Graph,
    embedding: Tensor,
    centers: Tensor,
    labels: &[usize],
    metric: CenterMetric,
) -> Result<Tensor, AutogradError> {
    let gathered = g.gather_rows(centers, labels)?;
    let diff = g.sub(embedding, gathered)?;
    match metric {
        CenterMetric::L2 => {
            let sq = g.mul(diff, diff)?;
            let s = g.sum(sq)?;
            g.scale(s, 0.5)
        }
        CenterMetric::L1 => {
            let a = g.abs(diff)?;
            g.sum(a)
        }
    }
}

fn forward_impl(
    config: &ModelConfig,
    dims: &ModelDims,
    params: &BTreeMap<String, Param>,
    batch: &[&FeatureMatrix],
    mut mode: Mode<'_>,
) -> Result<Forward, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::BatchShape("empty batch".into()));
    }
    let (h, w) = dims.input;
    for (i, fm) in batch.iter().enumerate() {
        if fm.kind() != config.input {
            return Err(ModelError::BatchShape(format!(
                "batch element {i} holds {} features, model expects {}",
                fm.kind(),
                config.input
            )));
        }
        if (fm.rows(), fm.cols()) != (h, w) {
            return Err(ModelError::BatchShape(format!(
                "batch element {i} is {}x{}, model expects {h}x{w}",
                fm.rows(),
                fm.cols()
            )));
        }
    }
    let bsz = batch.len();
    let mut input_flat = Vec::with_capacity(bsz * h * w);
    for fm in batch {
        input_flat.extend_from_slice(fm.values());
    }

    let mut g = Graph::new();
    let input = g.leaf(input_flat.clone(), vec![bsz, h, w], false)?;
    let mut param_ids = BTreeMap::new();
    for (name, p) in params {
        let t = g.leaf(p.values.clone(), p.shape.clone(), true)?;
        param_ids.insert(name.clone(), t);
    }

    let mut pooled = Vec::with_capacity(PATHS);
    for i in 0..PATHS {
        let wt = param_ids[&format!("path{i}/w")];
        let bt = param_ids[&format!("path{i}/b")];
        let conv = g.conv2d(input, wt, bt)?;
        let act = g.relu(conv)?;
        let (ph, pw) = dims.pool[i];
        pooled.push(g.max_pool(act, ph, pw)?);
    }
    let concat = g.concat_flatten(&pooled)?;

    let run_block = |g: &mut Graph,
                         x: Tensor,
                         prefix: &str,
                         mode: &mut Mode<'_>|
     -> Result<Tensor, ModelError> {
        let fc = g.linear(
            x,
            param_ids[&format!("{prefix}/fc/w")],
            param_ids[&format!("{prefix}/fc/b")],
        )?;
        let gamma = param_ids[&format!("{prefix}/bn/gamma")];
        let beta = param_ids[&format!("{prefix}/bn/beta")];
        let layer = format!("{prefix}/bn");
        let normed = match mode {
            Mode::Train { norm, .. } => {
                let (t, mean, var) = g.batch_norm_train(fc, gamma, beta, BN_EPS)?;
                norm.get_mut(&layer)
                    .expect("missing running stats")
                    .update(&mean, &var);
                t
            }
            Mode::Eval { norm } => {
                let rs = &norm[&layer];
                g.batch_norm_eval(fc, gamma, beta, &rs.mean, &rs.var, BN_EPS)?
            }
        };
        let act = g.relu(normed)?;
        let out = match mode {
            Mode::Train {
                streams, dropout, ..
            } => {
                if *dropout > 0.0 {
                    let rng = if prefix == "cls" {
                        &mut streams.classifier
                    } else {
                        &mut streams.decoder
                    };
                    g.dropout(act, *dropout, rng)?
                } else {
                    act
                }
            }
            Mode::Eval { .. } => act,
        };
        Ok(out)
    };

    let embedding = run_block(&mut g, concat, "cls", &mut mode)?;
    let logits = g.linear(embedding, param_ids["head/w"], param_ids["head/b"])?;

    let reconstruction = if config.variant.has_decoder() {
        let mut x = run_block(&mut g, concat, "dec", &mut mode)?;
        for i in 0..config.decoder_hidden.len() {
            let lin = g.linear(
                x,
                param_ids[&format!("dec/hidden{i}/w")],
                param_ids[&format!("dec/hidden{i}/b")],
            )?;
            x = g.relu(lin)?;
        }
        let out = g.linear(x, param_ids["dec/out/w"], param_ids["dec/out/b"])?;
        Some(g.sigmoid(out)?)
    } else {
        None
    };

    Ok(Forward {
        graph: g,
        concat,
        embedding,
        logits,
        reconstruction,
        param_ids,
        input_flat,
        batch_size: bsz,
    })
}

const SERC_MAGIC: &[u8; 4] = b"SERC";
const SERC_VERSION: u8 = 1;

// Binary tensor container: magic, version u8, count u32 LE, then per entry
// (sorted by name): name length u16 LE, UTF-8 name, rank u8, dims u32 LE
// each, f32 LE values row-major.
fn write_serc(path: &Path, entries: &[(String, &Param)]) -> Result<(), ModelError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(SERC_MAGIC);
    bytes.push(SERC_VERSION);
    bytes.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, p) in entries {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || p.shape.len() > u8::MAX as usize {
            return Err(ModelError::Checkpoint(format!("entry {name} too large")));
        }
        bytes.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        bytes.extend_from_slice(nb);
        bytes.push(p.shape.len() as u8);
        for &d in &p.shape {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_serc(path: &Path) -> Result<BTreeMap<String, Param>, ModelError> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        if pos + n > bytes.len() {
            return Err(ModelError::Checkpoint("truncated file".into()));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != SERC_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = take(1)?[0];
    if version != SERC_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = BTreeMap::new();
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("entry name is not UTF-8".into()))?;
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(ModelError::Checkpoint("entries not sorted by name".into()));
            }
        }
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(4 * n)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        prev_name = Some(name.clone());
        out.insert(name, Param { shape, values });
    }
    if pos != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

/// Convenience wrapper for gradient checks over a parameter subset: `f`
/// maps flattened parameter values to a scalar loss.
pub fn check_param_gradients<F>(
    f: F,
    analytic: &[f64],
    at: &[f64],
    eps: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    crate::autograd::grad_check(f, analytic, at, eps)
}
