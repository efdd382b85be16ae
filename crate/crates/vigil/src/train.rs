//! Head training: vanilla gradient descent under a stepwise-exponential
//! learning-rate schedule, with curve logging and resumable checkpoints.
//!
//! With the backbone frozen (the default) the loop precomputes every train
//! and val embedding once and then runs cheap head-only updates; the result
//! is bit-identical to embedding each batch on the fly, because both paths
//! feed the same f64 embeddings through the same update routine in the same
//! order.

use std::fs;
use std::path::Path;

use crate::dataset::{self, Label, Manifest, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{
    self, decode_checkpoint, encode_checkpoint, head_forward, BackboneParams, CheckpointBlob,
    HeadParams,
};
use crate::rng::RngState;

pub const CURVES_HEADER: &str = "step,train_loss,train_acc,val_loss,val_acc";

/// The rng stream id reserved for the training loop.
const TRAIN_RNG_STREAM: u64 = 100;

/// Training hyperparameters. Desk-scale defaults; the reference-scale step
/// count is 200,000.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub decay_interval_steps: u64,
    pub batch_size: usize,
    pub eval_interval_steps: u64,
    pub seed: u64,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            initial_lr: 0.1,
            lr_decay: 0.16,
            decay_interval_steps: 500,
            batch_size: 100,
            eval_interval_steps: 50,
            seed: 0,
            freeze_backbone: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 1 {
            return Err(Error::InvalidArgument("total_steps must be >= 1".into()));
        }
        if self.initial_lr <= 0.0 || !self.initial_lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "initial_lr must be > 0, got {}",
                self.initial_lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.decay_interval_steps < 1 {
            return Err(Error::InvalidArgument(
                "decay_interval_steps must be >= 1".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.eval_interval_steps < 1 {
            return Err(Error::InvalidArgument(
                "eval_interval_steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One logged sample of the loss/accuracy curves.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// The full training state; parameters are values, so states are cheap to
/// hand around and compare.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub backbone: BackboneParams,
    pub head: HeadParams,
    pub rng: RngState,
}

impl TrainState {
    pub fn new(config: &TrainConfig, backbone: BackboneParams, head: HeadParams) -> TrainState {
        TrainState {
            step: 0,
            backbone,
            head,
            rng: RngState::new(config.seed, TRAIN_RNG_STREAM),
        }
    }
}

/// Stepwise exponential decay: initial_lr x lr_decay^floor(step / interval).
pub fn lr_at_step(config: &TrainConfig, step: u64) -> f64 {
    let k = (step / config.decay_interval_steps).min(i32::MAX as u64) as i32;
    config.initial_lr * config.lr_decay.powi(k)
}

/// Mean loss and accuracy of a head over fixed embeddings.
fn head_metrics(head: &HeadParams, embeddings: &[&[f64]], labels: &[Label]) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (embedding, label) in embeddings.iter().zip(labels) {
        let trace = head_forward(head, embedding)?;
        loss_sum += model::cross_entropy(&trace.probabilities, *label);
        if model::decide(&trace.probabilities).0 == *label {
            correct += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// One vanilla gradient-descent update of the head over a batch of
/// embeddings. Returns the new head and the pre-update mean cross-entropy.
/// Non-finite loss or gradient components abort with a divergence error.
fn head_batch_update(
    head: &HeadParams,
    embeddings: &[&[f64]],
    labels: &[Label],
    lr: f64,
    step: u64,
) -> Result<(HeadParams, f64)> {
    debug_assert_eq!(embeddings.len(), labels.len());
    let batch = embeddings.len() as f64;
    let mut weight_sum = vec![0.0; head.weights.len()];
    let mut bias_sum = [0.0; 2];
    let mut loss_sum = 0.0;
    for (embedding, label) in embeddings.iter().zip(labels) {
        let trace = head_forward(head, embedding)?;
        loss_sum += model::cross_entropy(&trace.probabilities, *label);
        let (wg, bg) = model::head_gradient(head, embedding, *label)?;
        for (acc, g) in weight_sum.iter_mut().zip(&wg) {
            *acc += g;
        }
        bias_sum[0] += bg[0];
        bias_sum[1] += bg[1];
    }
    let mean_loss = loss_sum / batch;
    if !mean_loss.is_finite()
        || weight_sum.iter().any(|g| !g.is_finite())
        || !bias_sum[0].is_finite()
        || !bias_sum[1].is_finite()
    {
        return Err(Error::Divergence {
            step,
            reason: "non-finite loss or gradient".into(),
        });
    }
    let mut new_head = head.clone();
    for (w, g) in new_head.weights.iter_mut().zip(&weight_sum) {
        *w -= lr * g / batch;
    }
    new_head.bias[0] -= lr * bias_sum[0] / batch;
    new_head.bias[1] -= lr * bias_sum[1] / batch;
    Ok((new_head, mean_loss))
}

/// One training step over a decoded batch. The head moves against the mean
/// batch gradient at lr_at_step; the backbone also updates when not frozen.
/// Returns the advanced state and the pre-update mean cross-entropy.
pub fn train_step(
    mut state: TrainState,
    batch: &dataset::Batch,
    config: &TrainConfig,
) -> Result<(TrainState, f64)> {
    if batch.images.is_empty() || batch.images.len() != batch.labels.len() {
        return Err(Error::InvalidArgument(format!(
            "batch with {} images and {} labels",
            batch.images.len(),
            batch.labels.len()
        )));
    }
    let lr = lr_at_step(config, state.step);
    let step = state.step;

    if config.freeze_backbone {
        let embeddings: Vec<Vec<f64>> = batch
            .images
            .iter()
            .map(|img| model::embed(&state.backbone, img))
            .collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = embeddings.iter().map(Vec::as_slice).collect();
        let (head, loss) = head_batch_update(&state.head, &refs, &batch.labels, lr, step)?;
        state.head = head;
        state.step += 1;
        Ok((state, loss))
    } else {
        let (state, loss) = fine_tune_step(state, batch, lr)?;
        Ok((state, loss))
    }
}

/// Full-network update: backpropagates the head gradient through the
/// backbone and moves every parameter.
fn fine_tune_step(
    mut state: TrainState,
    batch: &dataset::Batch,
    lr: f64,
) -> Result<(TrainState, f64)> {
    let step = state.step;
    let batch_n = batch.images.len() as f64;
    let mut weight_sum = vec![0.0; state.head.weights.len()];
    let mut bias_sum = [0.0; 2];
    let mut loss_sum = 0.0;
    let mut backbone_sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = Vec::new();

    for (image, label) in batch.images.iter().zip(&batch.labels) {
        let trace = model::forward_trace(&state.backbone, image)?;
        let head_trace = head_forward(&state.head, &trace.output)?;
        loss_sum += model::cross_entropy(&head_trace.probabilities, *label);
        let (wg, bg) = model::head_gradient(&state.head, &trace.output, *label)?;
        for (acc, g) in weight_sum.iter_mut().zip(&wg) {
            *acc += g;
        }
        bias_sum[0] += bg[0];
        bias_sum[1] += bg[1];

        // d loss / d embedding = W . bias_grad
        let d_embedding: Vec<f64> = (0..state.head.embedding_dim)
            .map(|d| state.head.weight(d, 0) * bg[0] + state.head.weight(d, 1) * bg[1])
            .collect();
        let (_, layer_grads) = model::backward_trace(&state.backbone, &trace, &d_embedding);
        if backbone_sums.is_empty() {
            backbone_sums = layer_grads
                .iter()
                .map(|g| match g {
                    model::LayerGrads::Params { weights, bias } => {
                        Some((vec![0.0; weights.len()], vec![0.0; bias.len()]))
                    }
                    model::LayerGrads::None => None,
                })
                .collect();
        }
        for (sum, grads) in backbone_sums.iter_mut().zip(&layer_grads) {
            if let (Some((ws, bs)), model::LayerGrads::Params { weights, bias }) = (sum, grads) {
                for (acc, g) in ws.iter_mut().zip(weights) {
                    *acc += g;
                }
                for (acc, g) in bs.iter_mut().zip(bias) {
                    *acc += g;
                }
            }
        }
    }

    let mean_loss = loss_sum / batch_n;
    let finite = mean_loss.is_finite()
        && weight_sum.iter().all(|g| g.is_finite())
        && bias_sum.iter().all(|g| g.is_finite())
        && backbone_sums.iter().flatten().all(|(ws, bs)| {
            ws.iter().all(|g| g.is_finite()) && bs.iter().all(|g| g.is_finite())
        });
    if !finite {
        return Err(Error::Divergence {
            step,
            reason: "non-finite loss or gradient".into(),
        });
    }

    for (w, g) in state.head.weights.iter_mut().zip(&weight_sum) {
        *w -= lr * g / batch_n;
    }
    state.head.bias[0] -= lr * bias_sum[0] / batch_n;
    state.head.bias[1] -= lr * bias_sum[1] / batch_n;
    for (layer, sums) in state.backbone.layers.iter_mut().zip(&backbone_sums) {
        if let (
            model::Layer::Conv { weights, bias, .. } | model::Layer::Dense { weights, bias, .. },
            Some((ws, bs)),
        ) = (layer, sums)
        {
            for (w, g) in weights.iter_mut().zip(ws) {
                *w -= lr * g / batch_n;
            }
            for (b, g) in bias.iter_mut().zip(bs) {
                *b -= lr * g / batch_n;
            }
        }
    }
    state.step += 1;
    Ok((state, mean_loss))
}

/// Write the curves CSV. Floats use shortest-round-trip formatting, so a
/// parse of the file reproduces the exact values.
pub fn write_curves(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    let mut text = String::from(CURVES_HEADER);
    text.push('\n');
    for p in curves {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            p.step, p.train_loss, p.train_accuracy, p.val_loss, p.val_accuracy
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a curves CSV written by `write_curves`.
pub fn load_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CURVES_HEADER => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "not a curves file: first line {other:?}"
            )))
        }
    }
    let mut curves = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "curves line {}: expected 5 fields",
                i + 2
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidArgument(format!("curves line {}: bad float {s:?}", i + 2)))
        };
        curves.push(CurvePoint {
            step: fields[0]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("curves line {}: bad step", i + 2)))?,
            train_loss: parse(fields[1])?,
            train_accuracy: parse(fields[2])?,
            val_loss: parse(fields[3])?,
            val_accuracy: parse(fields[4])?,
        });
    }
    Ok(curves)
}

/// Precomputed embeddings of one split, in (shuffled) manifest order.
struct SplitCache {
    embeddings: Vec<Vec<f64>>,
    labels: Vec<Label>,
}

fn embed_split(backbone: &BackboneParams, manifest: &Manifest, split: Split) -> Result<SplitCache> {
    let records = manifest.records_of(split);
    let mut embeddings = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for rec in records {
        let image = rec.decode(manifest.base_dir.as_deref())?;
        embeddings.push(model::embed(backbone, &image)?);
        labels.push(rec.label);
    }
    Ok(SplitCache { embeddings, labels })
}

fn decode_split(manifest: &Manifest, split: Split) -> Result<(Vec<Image>, Vec<Label>)> {
    let records = manifest.records_of(split);
    let mut images = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for rec in records {
        images.push(rec.decode(manifest.base_dir.as_deref())?);
        labels.push(rec.label);
    }
    Ok((images, labels))
}

/// Cyclic batch index set for one step.
fn batch_indices(step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let start = (step as usize).wrapping_mul(batch_size);
    (0..batch_size).map(|i| (start + i) % n).collect()
}

fn save_partial_curves(path: Option<&Path>, curves: &[CurvePoint]) {
    if let Some(p) = path {
        let _ = write_curves(p, curves);
    }
}

/// Train from scratch: shuffles the train split by config.seed, then runs
/// `continue_training` from step 0. When `curves_path` is given the curves
/// CSV is written there (partial curves survive a divergence abort).
pub fn run_training(
    config: &TrainConfig,
    manifest: &Manifest,
    backbone_init: BackboneParams,
    head_init: HeadParams,
    curves_path: Option<&Path>,
) -> Result<(TrainState, Vec<CurvePoint>)> {
    let state = TrainState::new(config, backbone_init, head_init);
    continue_training(state, config, manifest, curves_path)
}

/// Run from `state.step` to `config.total_steps`. Resumed runs are
/// bit-identical to uninterrupted ones: the shuffle is a pure function of
/// (manifest, seed) and batch order is a pure function of the step index.
pub fn continue_training(
    mut state: TrainState,
    config: &TrainConfig,
    manifest: &Manifest,
    curves_path: Option<&Path>,
) -> Result<(TrainState, Vec<CurvePoint>)> {
    config.validate()?;
    if head_dim_of(&state) != state.backbone.embedding_dim {
        return Err(Error::InvalidArgument(format!(
            "head expects embedding_dim {}, backbone produces {}",
            head_dim_of(&state),
            state.backbone.embedding_dim
        )));
    }
    if state.step > config.total_steps {
        return Err(Error::IncompatibleCheckpoint(format!(
            "state at step {} is beyond total_steps {}",
            state.step, config.total_steps
        )));
    }
    for split in [Split::Train, Split::Val] {
        if manifest.records_of(split).is_empty() {
            return Err(Error::EmptySplit(split.as_str().into()));
        }
    }

    let shuffled = dataset::shuffle_within_split(manifest, config.seed);
    let mut curves = Vec::new();
    let initial_checksum = state.backbone.checksum();

    if config.freeze_backbone {
        let train = embed_split(&state.backbone, &shuffled, Split::Train)?;
        let val = embed_split(&state.backbone, &shuffled, Split::Val)?;
        let val_refs: Vec<&[f64]> = val.embeddings.iter().map(Vec::as_slice).collect();
        let n = train.embeddings.len();

        while state.step < config.total_steps {
            let idx = batch_indices(state.step, config.batch_size, n);
            let embeddings: Vec<&[f64]> = idx.iter().map(|i| train.embeddings[*i].as_slice()).collect();
            let labels: Vec<Label> = idx.iter().map(|i| train.labels[*i]).collect();
            let lr = lr_at_step(config, state.step);
            let (head, _) = match head_batch_update(&state.head, &embeddings, &labels, lr, state.step) {
                Ok(v) => v,
                Err(e) => {
                    save_partial_curves(curves_path, &curves);
                    return Err(e);
                }
            };
            state.head = head;
            state.step += 1;

            if state.step.is_multiple_of(config.eval_interval_steps) {
                let (train_loss, train_accuracy) = head_metrics(&state.head, &embeddings, &labels)?;
                let (val_loss, val_accuracy) = head_metrics(&state.head, &val_refs, &val.labels)?;
                curves.push(CurvePoint {
                    step: state.step,
                    train_loss,
                    train_accuracy,
                    val_loss,
                    val_accuracy,
                });
            }
        }
        debug_assert_eq!(state.backbone.checksum(), initial_checksum);
    } else {
        let (train_images, train_labels) = decode_split(&shuffled, Split::Train)?;
        let (val_images, val_labels) = decode_split(&shuffled, Split::Val)?;
        let n = train_images.len();

        while state.step < config.total_steps {
            let idx = batch_indices(state.step, config.batch_size, n);
            let batch = dataset::Batch {
                images: idx.iter().map(|i| train_images[*i].clone()).collect(),
                labels: idx.iter().map(|i| train_labels[*i]).collect(),
            };
            let next = match train_step(state, &batch, config) {
                Ok((next, _)) => next,
                Err(e) => {
                    save_partial_curves(curves_path, &curves);
                    return Err(e);
                }
            };
            state = next;

            if state.step.is_multiple_of(config.eval_interval_steps) {
                let train_embs: Vec<Vec<f64>> = batch
                    .images
                    .iter()
                    .map(|img| model::embed(&state.backbone, img))
                    .collect::<Result<_>>()?;
                let train_refs: Vec<&[f64]> = train_embs.iter().map(Vec::as_slice).collect();
                let (train_loss, train_accuracy) =
                    head_metrics(&state.head, &train_refs, &batch.labels)?;
                let val_embs: Vec<Vec<f64>> = val_images
                    .iter()
                    .map(|img| model::embed(&state.backbone, img))
                    .collect::<Result<_>>()?;
                let val_refs: Vec<&[f64]> = val_embs.iter().map(Vec::as_slice).collect();
                let (val_loss, val_accuracy) = head_metrics(&state.head, &val_refs, &val_labels)?;
                curves.push(CurvePoint {
                    step: state.step,
                    train_loss,
                    train_accuracy,
                    val_loss,
                    val_accuracy,
                });
            }
        }
    }

    if let Some(path) = curves_path {
        write_curves(path, &curves)?;
    }
    Ok((state, curves))
}

fn head_dim_of(state: &TrainState) -> usize {
    state.head.embedding_dim
}

/// Persist the full training state (config echo, step, rng, parameters).
pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, path: &Path) -> Result<()> {
    let blob = CheckpointBlob {
        total_steps: config.total_steps,
        initial_lr: config.initial_lr,
        lr_decay: config.lr_decay,
        decay_interval_steps: config.decay_interval_steps,
        batch_size: config.batch_size as u64,
        eval_interval_steps: config.eval_interval_steps,
        seed: config.seed,
        freeze_backbone: config.freeze_backbone,
        step: state.step,
        rng_seed: state.rng.seed,
        rng_stream: state.rng.stream,
        rng_word_pos: state.rng.word_pos,
        backbone: state.backbone.clone(),
        head: state.head.clone(),
    };
    fs::write(path, encode_checkpoint(&blob)).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint and verify it is resumable under `config`. Every
/// config field except total_steps must match the checkpoint header, so a
/// resumed run retraces the original trajectory exactly.
pub fn resume(path: &Path, config: &TrainConfig, manifest: &Manifest) -> Result<TrainState> {
    config.validate()?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let blob = decode_checkpoint(&bytes, path)?;

    let mismatch = |field: &str, stored: String, requested: String| {
        Err(Error::IncompatibleCheckpoint(format!(
            "{field} mismatch: checkpoint has {stored}, config has {requested}"
        )))
    };
    if blob.batch_size != config.batch_size as u64 {
        return mismatch("batch_size", blob.batch_size.to_string(), config.batch_size.to_string());
    }
    if blob.initial_lr != config.initial_lr {
        return mismatch("initial_lr", blob.initial_lr.to_string(), config.initial_lr.to_string());
    }
    if blob.lr_decay != config.lr_decay {
        return mismatch("lr_decay", blob.lr_decay.to_string(), config.lr_decay.to_string());
    }
    if blob.decay_interval_steps != config.decay_interval_steps {
        return mismatch(
            "decay_interval_steps",
            blob.decay_interval_steps.to_string(),
            config.decay_interval_steps.to_string(),
        );
    }
    if blob.eval_interval_steps != config.eval_interval_steps {
        return mismatch(
            "eval_interval_steps",
            blob.eval_interval_steps.to_string(),
            config.eval_interval_steps.to_string(),
        );
    }
    if blob.seed != config.seed {
        return mismatch("seed", blob.seed.to_string(), config.seed.to_string());
    }
    if blob.freeze_backbone != config.freeze_backbone {
        return mismatch(
            "freeze_backbone",
            blob.freeze_backbone.to_string(),
            config.freeze_backbone.to_string(),
        );
    }
    if blob.step > config.total_steps {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint at step {} is beyond total_steps {}",
            blob.step, config.total_steps
        )));
    }
    if blob.head.embedding_dim != blob.backbone.embedding_dim {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint head expects embedding_dim {}, backbone produces {}",
            blob.head.embedding_dim, blob.backbone.embedding_dim
        )));
    }
    for split in [Split::Train, Split::Val] {
        if manifest.records_of(split).is_empty() {
            return Err(Error::EmptySplit(split.as_str().into()));
        }
    }
    Ok(TrainState {
        step: blob.step,
        backbone: blob.backbone,
        head: blob.head,
        rng: RngState {
            seed: blob.rng_seed,
            stream: blob.rng_stream,
            word_pos: blob.rng_word_pos,
        },
    })
}
