//! Mini-batch SGD with momentum, per-epoch validation and best-model
//! checkpointing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::corpus::{load_images, CorpusManifest, Split};
use crate::error::{TensorError, TrainError};
use crate::model::{ArchitectureConfig, Classifier, ModelParams};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectOn {
    ValAccuracy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub input_size: usize,
    pub checkpoint_out: PathBuf,
    pub select_on: SelectOn,
    /// JSON-lines history; defaults to `<checkpoint_out>.history.jsonl`.
    pub history_out: Option<PathBuf>,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64, checkpoint_out: PathBuf) -> Self {
        let arch = ArchitectureConfig::default();
        TrainConfig {
            epochs,
            batch_size,
            learning_rate: 0.01,
            momentum: 0.9,
            seed,
            input_size: arch.input_size,
            checkpoint_out,
            select_on: SelectOn::ValAccuracy,
            history_out: None,
            conv1_filters: arch.conv1_filters,
            conv2_filters: arch.conv2_filters,
            kernel: arch.kernel,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs < 1 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return fail("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0, 1)");
        }
        Ok(())
    }

    pub fn architecture(&self, num_classes: usize) -> ArchitectureConfig {
        ArchitectureConfig {
            input_size: self.input_size,
            conv1_filters: self.conv1_filters,
            conv2_filters: self.conv2_filters,
            kernel: self.kernel,
            num_classes,
            ..ArchitectureConfig::default()
        }
    }

    pub fn history_path(&self) -> PathBuf {
        self.history_out.clone().unwrap_or_else(|| {
            let mut s = self.checkpoint_out.clone().into_os_string();
            s.push(".history.jsonl");
            PathBuf::from(s)
        })
    }

    /// Parses `key = value` lines. `#` starts a comment. `epochs`,
    /// `batch_size`, `seed` and `checkpoint_out` are required; relative
    /// paths are kept as written.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut epochs = None;
        let mut batch_size = None;
        let mut seed = None;
        let mut checkpoint_out = None;
        let mut cfg = TrainConfig::new(1, 1, 0, PathBuf::new());

        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, TrainError> {
            v.parse()
                .map_err(|_| TrainError::Config(format!("invalid value {v:?} for key {key}")))
        }

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "epochs" => epochs = Some(num(key, value)?),
                "batch_size" => batch_size = Some(num(key, value)?),
                "learning_rate" => cfg.learning_rate = num(key, value)?,
                "momentum" => cfg.momentum = num(key, value)?,
                "seed" => seed = Some(num(key, value)?),
                "input_size" => cfg.input_size = num(key, value)?,
                "checkpoint_out" => checkpoint_out = Some(PathBuf::from(value)),
                "history_out" => cfg.history_out = Some(PathBuf::from(value)),
                "conv1_filters" => cfg.conv1_filters = num(key, value)?,
                "conv2_filters" => cfg.conv2_filters = num(key, value)?,
                "kernel" => cfg.kernel = num(key, value)?,
                "select_on" => {
                    if value != "val_accuracy" {
                        return Err(TrainError::Config(format!(
                            "select_on supports only val_accuracy, got {value:?}"
                        )));
                    }
                }
                other => return Err(TrainError::Config(format!("unknown key {other:?}"))),
            }
        }
        let missing = |k: &str| TrainError::Config(format!("missing required key {k}"));
        cfg.epochs = epochs.ok_or_else(|| missing("epochs"))?;
        cfg.batch_size = batch_size.ok_or_else(|| missing("batch_size"))?;
        cfg.seed = seed.ok_or_else(|| missing("seed"))?;
        cfg.checkpoint_out = checkpoint_out.ok_or_else(|| missing("checkpoint_out"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }
}

/// Loss, accuracy and confusion counts of a model on one set of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub count: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
}

impl SplitMetrics {
    pub fn correct(&self) -> usize {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_confusion: Vec<Vec<usize>>,
}

/// Decoded images held in memory, CHW `[-1, 1]` per sample.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub input_size: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn load(
        manifest: &CorpusManifest,
        split: Split,
        input_size: usize,
    ) -> Result<Self, TrainError> {
        let records = manifest.records_in(split);
        let images = load_images(manifest, &records, input_size)?;
        Ok(ImageSet {
            input_size,
            images,
            labels: records.iter().map(|r| r.label_index).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>), TensorError> {
        let s = self.input_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![indices.len(), 3, s, s], data)?, labels))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 64;

/// Scores `model` on `set` without touching its parameters.
pub fn evaluate_set<M: Classifier + ?Sized>(
    model: &M,
    set: &ImageSet,
) -> Result<SplitMetrics, TrainError> {
    if set.is_empty() {
        return Err(TrainError::Usage("cannot evaluate an empty split".into()));
    }
    let k = model.num_classes();
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= k) {
        return Err(TrainError::Config(format!(
            "label {bad} is outside the model's {k} classes"
        )));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    let mut loss_sum = 0.0f64;
    let order: Vec<usize> = (0..set.len()).collect();
    for chunk in order.chunks(EVAL_BATCH) {
        let (x, labels) = set.batch(chunk)?;
        let logits = model.logits(&x)?;
        if logits.shape() != [chunk.len(), k] {
            return Err(TrainError::Config(format!(
                "model produced logits of shape {:?}, expected [{}, {k}]",
                logits.shape(),
                chunk.len()
            )));
        }
        let (loss, _) = ops::softmax_xent(&logits, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            confusion[label][argmax(row)] += 1;
        }
    }
    let count = set.len();
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    Ok(SplitMetrics {
        count,
        loss: loss_sum / count as f64,
        accuracy: correct as f64 / count as f64,
        confusion,
    })
}

/// Loads `split` of the manifest and evaluates `model` on it.
pub fn evaluate<M: Classifier + ?Sized>(
    model: &M,
    manifest: &CorpusManifest,
    split: Split,
) -> Result<SplitMetrics, TrainError> {
    if manifest.labels.len() != model.num_classes() {
        return Err(TrainError::Config(format!(
            "model has {} classes but the corpus has {}",
            model.num_classes(),
            manifest.labels.len()
        )));
    }
    let set = ImageSet::load(manifest, split, model.input_size())?;
    if set.is_empty() {
        return Err(TrainError::Usage(format!("split {split} is empty")));
    }
    evaluate_set(model, &set)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochMetrics>,
}

/// SGD with momentum: `v <- mu*v - lr*g; w <- w + v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: &ModelParams<f32>, learning_rate: f32, momentum: f32) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &[Vec<f32>; 6]) {
        for ((t, g), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v - self.learning_rate * g;
                *w += *v;
            }
        }
    }
}

/// One forward/backward pass; returns the batch loss, the number of correct
/// predictions and the parameter gradients.
pub fn batch_gradients(
    params: &ModelParams<f32>,
    images: Tensor<f32>,
    labels: &[usize],
) -> Result<(f32, usize, [Vec<f32>; 6]), TensorError> {
    let mut tape = Tape::new();
    let x = tape.leaf(images);
    let (logits, vars) = params.forward_taped(&mut tape, x)?;
    let k = params.config().num_classes;
    let correct = tape
        .value(logits)
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let loss = tape.softmax_xent(logits, labels)?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    Ok((loss_value, correct, vars.grads(&mut tape)?))
}

/// Trains on in-memory sets. History lines are appended to `history` as each
/// epoch finishes.
pub fn train_sets(
    mut params: ModelParams<f32>,
    train_set: &ImageSet,
    val_set: &ImageSet,
    config: &TrainConfig,
    mut history_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let k = params.config().num_classes;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config("train and val splits must be non-empty".into()));
    }
    if let Some(&bad) = train_set.labels.iter().chain(&val_set.labels).find(|&&l| l >= k) {
        return Err(TrainError::Config(format!(
            "label {bad} does not fit the model's {k} classes"
        )));
    }
    if train_set.input_size != params.config().input_size {
        return Err(TrainError::Config(format!(
            "images are {} px but the model expects {} px",
            train_set.input_size,
            params.config().input_size
        )));
    }

    let mut sgd = Sgd::new(&params, config.learning_rate as f32, config.momentum as f32);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = train_set.batch(chunk)?;
            let (loss, ok, grads) = batch_gradients(&params, x, &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: b });
            }
            sgd.step(&mut params, &grads);
            if !params.all_finite() {
                return Err(TrainError::Divergence { epoch, batch: b });
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += ok;
        }

        let val = evaluate_set(&params, val_set)?;
        if !val.loss.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: order.len().div_ceil(config.batch_size),
            });
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            val_confusion: val.confusion,
        };
        info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            metrics.train_loss, metrics.train_accuracy, metrics.val_loss, metrics.val_accuracy
        );
        if best.is_none_or(|(_, acc)| metrics.val_accuracy > acc) {
            save_checkpoint(&params, &config.checkpoint_out)?;
            best = Some((epoch, metrics.val_accuracy));
        }
        if let Some(sink) = history_sink.as_deref_mut() {
            let line = serde_json::to_string(&metrics).expect("metrics serialise");
            writeln!(sink, "{line}")
                .and_then(|_| sink.flush())
                .map_err(|source| TrainError::Io {
                    path: config.history_path(),
                    source,
                })?;
        }
        history.push(metrics);
    }

    let (best_epoch, best_val_accuracy) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_checkpoint: config.checkpoint_out.clone(),
        best_epoch,
        best_val_accuracy,
        history,
    })
}

/// Trains on the manifest's train split, validating on its val split, and
/// writes the history file next to the checkpoint.
pub fn train(
    params: ModelParams<f32>,
    manifest: &CorpusManifest,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if manifest.labels.len() != params.config().num_classes {
        return Err(TrainError::Config(format!(
            "model has {} classes but the corpus has {}",
            params.config().num_classes,
            manifest.labels.len()
        )));
    }
    let size = params.config().input_size;
    let train_set = ImageSet::load(manifest, Split::Train, size)?;
    let val_set = ImageSet::load(manifest, Split::Val, size)?;
    let history_path = config.history_path();
    let file = fs::File::create(&history_path).map_err(|source| TrainError::Io {
        path: history_path.clone(),
        source,
    })?;
    let mut sink = BufWriter::new(file);
    train_sets(params, &train_set, &val_set, config, Some(&mut sink))
}
