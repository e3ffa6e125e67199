//! Training loop: augmentation, Hungarian matching, loss, AdamW with two
//! learning-rate groups, checkpoints and metric history.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::InvalidKey;
use crate::data::{augment, AugmentConfig, DatasetManifest, Image, Normalization, Sample};
use crate::eval::{compute_role_map, decode_predictions, ApReport, DecodeConfig, Detection, EvalError, Setting};
use crate::matching::{build_cost_matrix, Assignment, hoi_loss, hungarian, LossParts, MatchError, MatchWeights};
use crate::model::{ForwardOptions, HoiPrediction, HoiTransformer, ModelConfig, ModelError};
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{clip_grad_norm, AdamWConfig, AdamWState, Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Config(InvalidKey),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {step} on sample {sample}: {parts:?}")]
    NonFinite { step: u64, sample: String, parts: LossParts },
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to one pass over the data, `ceil(len / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr_transformer: f64,
    pub lr_backbone: f64,
    /// Both rates are multiplied by 0.1 from this epoch on.
    pub lr_drop: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (and after the last one); 0 only at the end.
    pub eval_interval: usize,
    pub matching: MatchWeights,
    pub augment: AugmentConfig,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            steps_per_epoch: None,
            batch_size: 2,
            lr_transformer: 1e-4,
            lr_backbone: 1e-5,
            lr_drop: 200,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.1,
            seed: 0,
            eval_interval: 10,
            matching: MatchWeights::default(),
            augment: AugmentConfig::default(),
            normalization: Normalization::default(),
        }
    }
}

impl TrainConfig {
    /// Settings that overfit 20 synthetic 64x64 scenes with the desk model in
    /// well under a minute of one core. The backbone starts from random
    /// weights, so both groups share the larger rate.
    pub fn desk() -> Self {
        Self {
            epochs: 500,
            lr_drop: 400,
            batch_size: 4,
            lr_transformer: 5e-4,
            lr_backbone: 5e-4,
            eval_interval: 50,
            ..Self::default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// `(transformer, backbone)` learning rates for `epoch`.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let k = if epoch >= self.lr_drop { 0.1 } else { 1.0 };
        (self.lr_transformer * k, self.lr_backbone * k)
    }

    /// Problems are reported against `train.<field>` keys.
    pub fn validate(&self) -> std::result::Result<(), InvalidKey> {
        let bad = |key: &str, message: String| Err(InvalidKey::new(format!("train.{key}"), message));
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        // zero freezes a group; negative rates are never meaningful
        for (key, v) in [("lr_transformer", self.lr_transformer), ("lr_backbone", self.lr_backbone)] {
            if !nonneg(v) {
                return bad(key, format!("must be a non-negative number, got {v}"));
            }
        }
        if self.lr_drop > self.epochs {
            return bad("lr_drop", format!("{} exceeds epochs ({})", self.lr_drop, self.epochs));
        }
        if !nonneg(self.weight_decay) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(key, format!("must lie in [0, 1), got {v}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad("eps", format!("must be positive, got {}", self.eps));
        }
        if !nonneg(self.grad_clip) {
            return bad("grad_clip", format!("must be non-negative, got {}", self.grad_clip));
        }
        if let Err(m) = self.matching.validate() {
            return bad("matching", m);
        }
        if let Err((key, m)) = self.augment.validate() {
            return bad(&format!("augment.{key}"), m);
        }
        if self.normalization.std.iter().any(|s| !(*s > 0.0)) {
            return bad("normalization.std", "must be positive".into());
        }
        Ok(())
    }
}

/// Counters and optimizer moments. Everything random is derived from
/// `(seed, epoch or step)`, so no generator state needs saving.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_map: Option<f64>,
    pub optimizer: AdamWState,
}

/// What a checkpoint records besides tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: DatasetManifest,
    pub epoch: usize,
    pub step: u64,
    pub best_map: Option<f64>,
    pub optimizer_steps: Vec<u64>,
}

const PARAM_PREFIX: &str = "param/";
const M_PREFIX: &str = "adam_m/";
const V_PREFIX: &str = "adam_v/";

/// One metric-history line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub kind: MetricKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricKind {
    Train {
        loss: LossParts,
        grad_norm: f64,
        lr_transformer: f64,
        lr_backbone: f64,
    },
    Eval {
        map_full: Option<f64>,
        map_rare: Option<f64>,
        map_non_rare: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Mean over the batch.
    pub loss: LossParts,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// The assignment used for each sample, computed from this step's forward pass.
    pub assignments: Vec<Assignment>,
}

/// Mixes a seed with a tag sequence (splitmix64 finalizer per word).
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    tags.iter()
        .fold(mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)), |h, &t| {
            mix(h ^ t.wrapping_add(0x9e37_79b9_7f4a_7c15))
        })
}

const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_DROPOUT: u64 = 3;

pub struct Trainer {
    pub model: HoiTransformer,
    pub config: TrainConfig,
    pub manifest: DatasetManifest,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, manifest: DatasetManifest) -> Result<Self> {
        config.validate().map_err(TrainError::Config)?;
        if model_config.num_object_classes != manifest.num_objects() {
            return Err(TrainError::Config(InvalidKey::new(
                "model.num_object_classes",
                format!("{} but the dataset has {} object classes", model_config.num_object_classes, manifest.num_objects()),
            )));
        }
        if model_config.num_interaction_classes != manifest.num_interactions() {
            return Err(TrainError::Config(InvalidKey::new(
                "model.num_interaction_classes",
                format!(
                    "{} but the dataset has {} interaction classes",
                    model_config.num_interaction_classes,
                    manifest.num_interactions()
                ),
            )));
        }
        let model = HoiTransformer::new(model_config)?;
        let optimizer = AdamWState::new(model.params().iter().map(|(_, t)| t.len()));
        Ok(Self {
            model,
            config,
            manifest,
            state: TrainState {
                epoch: 0,
                step: 0,
                best_map: None,
                optimizer,
            },
        })
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.config().clone(),
            train: self.config.clone(),
            manifest: self.manifest.clone(),
            epoch: self.state.epoch,
            step: self.state.step,
            best_map: self.state.best_map,
            optimizer_steps: self.state.optimizer.moments.iter().map(|m| m.step).collect(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for ((name, t), m) in self.model.params().iter().zip(&self.state.optimizer.moments) {
            tensors.insert(format!("{PARAM_PREFIX}{name}"), t.clone());
            let shape = t.shape().to_vec();
            tensors.insert(format!("{M_PREFIX}{name}"), Tensor::new(shape.clone(), m.m.clone()).expect("moment shape"));
            tensors.insert(format!("{V_PREFIX}{name}"), Tensor::new(shape, m.v.clone()).expect("moment shape"));
        }
        Checkpoint {
            metadata: serde_json::to_string(&self.meta()).expect("metadata serializes"),
            tensors,
        }
    }

    /// Restore a run, optimizer state included.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = parse_meta(ckpt)?;
        let mut t = Trainer::new(meta.model.clone(), meta.train.clone(), meta.manifest.clone())?;
        t.model.params_mut().load_from(&strip_prefix(ckpt, PARAM_PREFIX))?;
        let ms = strip_prefix(ckpt, M_PREFIX);
        let vs = strip_prefix(ckpt, V_PREFIX);
        if meta.optimizer_steps.len() != t.model.params().len() {
            return Err(TrainError::Metadata("optimizer step count disagrees with the model".into()));
        }
        for (i, (name, p)) in t.model.params().iter().enumerate() {
            let (Some(m), Some(v)) = (ms.get(name), vs.get(name)) else {
                return Err(TrainError::Metadata(format!("missing optimizer moments for {name}")));
            };
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(TrainError::Metadata(format!("optimizer moments for {name} have the wrong shape")));
            }
            let st = &mut t.state.optimizer.moments[i];
            st.m = m.data().to_vec();
            st.v = v.data().to_vec();
            st.step = meta.optimizer_steps[i];
        }
        t.state.epoch = meta.epoch;
        t.state.step = meta.step;
        t.state.best_map = meta.best_map;
        Ok(t)
    }

    /// One optimizer step on already-augmented samples.
    pub fn train_step(&mut self, batch: &[Sample], epoch: usize) -> Result<StepOutcome> {
        assert!(!batch.is_empty(), "empty batch");
        let (lr_t, lr_b) = self.config.learning_rates(epoch);
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, true);
        let mut dropout = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[TAG_DROPOUT, self.state.step]));
        let mut total = None;
        let mut parts = LossParts::default();
        let k = 1.0 / batch.len() as f64;
        let mut assignments = Vec::with_capacity(batch.len());
        for s in batch {
            let image = s.image.to_tensor(&self.config.normalization);
            let opts = ForwardOptions {
                dropout_rng: Some(&mut dropout),
            };
            let out = self.model.forward(&mut g, &p, &image, opts)?;
            let preds = out.heads.predictions(&g);
            let cost = build_cost_matrix(&s.hois, &preds, &self.config.matching)?;
            let sigma = hungarian(&cost)?;
            let loss = hoi_loss(&mut g, &out.heads, &s.hois, &sigma, &self.config.matching)?;
            if !loss.parts.total.is_finite() {
                return Err(TrainError::NonFinite {
                    step: self.state.step,
                    sample: s.id.clone(),
                    parts: loss.parts,
                });
            }
            assignments.push(sigma);
            parts += loss.parts.scaled(k);
            let term = g.scale(loss.total, k);
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
        }
        g.backward(total.expect("non-empty batch"))?;
        let mut grads = p.gradients(&g, self.model.params());
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.state.step,
                sample: batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(","),
                parts,
            });
        }
        let adam = self.config.adamw();
        let ids: Vec<_> = self.model.params().ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let lr = if self.model.is_backbone(id) { lr_b } else { lr_t };
            // a zero rate freezes the group: no decay, no moment update
            if lr == 0.0 {
                continue;
            }
            let param = self.model.params_mut().get_mut(id).data_mut();
            self.state.optimizer.update(i, param, &grads[i], lr, &adam)?;
        }
        self.state.step += 1;
        Ok(StepOutcome {
            loss: parts,
            grad_norm,
            assignments,
        })
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        self.config
            .steps_per_epoch
            .unwrap_or_else(|| n.div_ceil(self.config.batch_size))
    }

    /// Augmented batch for the current step.
    pub fn make_batch(&self, samples: &[Sample], order: &[usize], step_in_epoch: usize) -> Vec<Sample> {
        let b = self.config.batch_size;
        (0..b)
            .map(|k| {
                let idx = order[(step_in_epoch * b + k) % order.len()];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[TAG_AUGMENT, self.state.step, k as u64]));
                augment(&samples[idx], &mut rng, &self.config.augment)
            })
            .collect()
    }

    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[TAG_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        order
    }

    /// Train until `config.epochs`, resuming from `state.epoch`.
    ///
    /// With an output directory, writes `metrics.jsonl`, `last.ckpt` after
    /// every epoch and `best.ckpt` whenever the evaluation mAP improves.
    pub fn fit(
        &mut self,
        train: &[Sample],
        eval: Option<&[Sample]>,
        out_dir: Option<&Path>,
        observer: &mut dyn FnMut(&MetricRecord),
    ) -> Result<Vec<MetricRecord>> {
        if train.is_empty() {
            return Err(TrainError::Config(InvalidKey::new("data.train", "training set is empty".into())));
        }
        let n_q = self.model.config().num_queries;
        if let Some(s) = train.iter().find(|s| s.hois.len() > n_q) {
            return Err(MatchError::Capacity {
                gts: s.hois.len(),
                queries: n_q,
            }
            .into());
        }
        let eval = eval.unwrap_or(train);
        let mut history = Vec::new();
        let mut log = match out_dir {
            Some(dir) => Some(HistoryWriter::open(dir, self.state.step)?),
            None => None,
        };
        let mut emit = |rec: MetricRecord, log: &mut Option<HistoryWriter>, history: &mut Vec<MetricRecord>| -> Result<()> {
            if let Some(w) = log {
                w.append(&rec)?;
            }
            observer(&rec);
            history.push(rec);
            Ok(())
        };
        let steps = self.steps_per_epoch(train.len());
        while self.state.epoch < self.config.epochs {
            let epoch = self.state.epoch;
            let order = self.epoch_order(train.len(), epoch);
            let (lr_t, lr_b) = self.config.learning_rates(epoch);
            for s in 0..steps {
                let batch = self.make_batch(train, &order, s);
                let out = self.train_step(&batch, epoch)?;
                let rec = MetricRecord {
                    step: self.state.step,
                    epoch,
                    kind: MetricKind::Train {
                        loss: out.loss,
                        grad_norm: out.grad_norm,
                        lr_transformer: lr_t,
                        lr_backbone: lr_b,
                    },
                };
                emit(rec, &mut log, &mut history)?;
            }
            self.state.epoch += 1;
            let done = self.state.epoch == self.config.epochs;
            let due = self.config.eval_interval > 0 && self.state.epoch % self.config.eval_interval == 0;
            if done || due {
                let report = evaluate(&self.model, eval, &self.manifest, &self.config.normalization, Setting::Default)?;
                let rec = MetricRecord {
                    step: self.state.step,
                    epoch,
                    kind: MetricKind::Eval {
                        map_full: report.full,
                        map_rare: report.rare,
                        map_non_rare: report.non_rare,
                    },
                };
                emit(rec, &mut log, &mut history)?;
                let score = report.full.unwrap_or(0.0);
                if self.state.best_map.map_or(true, |b| score > b) {
                    self.state.best_map = Some(score);
                    if let Some(dir) = out_dir {
                        self.checkpoint().save(dir.join("best.ckpt"))?;
                    }
                }
            }
            if let Some(dir) = out_dir {
                self.checkpoint().save(dir.join("last.ckpt"))?;
            }
        }
        Ok(history)
    }
}

fn strip_prefix(ckpt: &Checkpoint, prefix: &str) -> BTreeMap<String, Tensor> {
    ckpt.tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
        .collect()
}

pub fn parse_meta(ckpt: &Checkpoint) -> Result<CheckpointMeta> {
    serde_json::from_str(&ckpt.metadata).map_err(|e| TrainError::Metadata(e.to_string()))
}

/// Model weights and metadata for inference.
pub fn load_model(path: &Path) -> Result<(HoiTransformer, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let meta = parse_meta(&ckpt)?;
    let mut model = HoiTransformer::new(meta.model.clone())?;
    model.params_mut().load_from(&strip_prefix(&ckpt, PARAM_PREFIX))?;
    Ok((model, meta))
}

struct HistoryWriter {
    path: PathBuf,
    file: fs::File,
}

impl HistoryWriter {
    /// Keeps only records up to `step`, so a resumed run continues cleanly.
    fn open(dir: &Path, step: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("metrics.jsonl");
        let mut kept = String::new();
        if step > 0 {
            if let Ok(text) = fs::read_to_string(&path) {
                for line in text.lines() {
                    match serde_json::from_str::<MetricRecord>(line) {
                        Ok(r) if r.step <= step => {
                            kept.push_str(line);
                            kept.push('\n');
                        }
                        _ => {}
                    }
                }
            }
        }
        fs::write(&path, kept).map_err(io_err(&path))?;
        let file = fs::OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        Ok(Self { path, file })
    }

    fn append(&mut self, rec: &MetricRecord) -> Result<()> {
        let mut line = serde_json::to_string(rec).expect("record serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err(&self.path))
    }
}

pub fn load_history(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Metadata(format!("{}: {e}", path.display()))))
        .collect()
}

/// Raw per-query outputs for one image.
pub fn predict_image(model: &HoiTransformer, image: &Image, norm: &Normalization) -> Result<Vec<HoiPrediction>> {
    Ok(model.predict(&image.to_tensor(norm))?.0)
}

pub fn detect(
    model: &HoiTransformer,
    id: &str,
    image: &Image,
    manifest: &DatasetManifest,
    norm: &Normalization,
    decode: &DecodeConfig,
) -> Result<Vec<Detection>> {
    Ok(decode_predictions(id, &predict_image(model, image, norm)?, manifest, decode))
}

/// Role mAP of `model` on `samples`, scoring every query (threshold 0).
pub fn evaluate(
    model: &HoiTransformer,
    samples: &[Sample],
    manifest: &DatasetManifest,
    norm: &Normalization,
    setting: Setting,
) -> Result<ApReport> {
    let decode = DecodeConfig {
        threshold: 0.0,
        max_detections: None,
    };
    let mut dets = Vec::new();
    let mut gts = BTreeMap::new();
    for s in samples {
        dets.extend(detect(model, &s.id, &s.image, manifest, norm, &decode)?);
        gts.insert(s.id.clone(), s.hois.clone());
    }
    Ok(compute_role_map(&dets, &gts, manifest, setting)?)
}
