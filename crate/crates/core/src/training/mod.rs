//! Optimization of the trainable parameters: pixel cross-entropy, AdamW with
//! decoupled weight decay, a one-cycle cosine schedule, deterministic batch
//! order and checkpoints.

mod checkpoint;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use schedule::{lr_at_step, TrainConfig};

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::SegLogits;
use crate::error::{Error, Result};
use crate::fusion::FrozenInputs;
use crate::model::Model;
use crate::numerics::{Gradients, ParamId, Tape, Tensor, Var};

/// Label value excluded from the loss and from evaluation.
pub const IGNORE_ID: u8 = 255;

/// Environment variable capping the worker threads used per batch.
pub const THREADS_ENV: &str = "DEPTHFORGE_THREADS";

/// Per-patch class counts of a pixel label map: `counts[p·K + k]` is the
/// number of pixels of class `k` covered by patch `p`.
///
/// Nearest-patch upsampling gives every pixel its patch's logits, so the mean
/// pixel cross-entropy equals the count-weighted patch cross-entropy.
pub fn label_counts(labels: &[u8], grid_side: usize, patch_size: usize, num_classes: usize) -> Result<Vec<f64>> {
    let side = grid_side * patch_size;
    if labels.len() != side * side {
        return Err(Error::shape("label map", side * side, labels.len()));
    }
    let mut counts = vec![0.0; grid_side * grid_side * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_ID {
            continue;
        }
        if l as usize >= num_classes {
            return Err(Error::InvalidArgument(format!("label {l} at pixel {i} is outside [0, {num_classes})")));
        }
        let (y, x) = (i / side, i % side);
        let patch = (y / patch_size) * grid_side + x / patch_size;
        counts[patch * num_classes + l as usize] += 1.0;
    }
    if counts.iter().all(|&c| c == 0.0) {
        return Err(Error::InvalidArgument("every pixel carries the ignore id".into()));
    }
    Ok(counts)
}

/// Mean per-pixel softmax cross-entropy on the tape.
pub fn segmentation_loss(tape: &mut Tape<'_>, patch_logits: Var, labels: &[u8], grid_side: usize, patch_size: usize) -> Result<Var> {
    let k = tape.value(patch_logits).cols();
    let counts = label_counts(labels, grid_side, patch_size, k)?;
    tape.cross_entropy(patch_logits, counts)
}

/// Value of the segmentation loss for fixed logits.
pub fn segmentation_loss_value(logits: &SegLogits, labels: &[u8]) -> Result<f64> {
    let store = crate::numerics::ParamStore::new();
    let mut tape = Tape::new(&store);
    let v = tape.input(logits.patch_logits.clone());
    let loss = segmentation_loss(&mut tape, v, labels, logits.grid_side, logits.patch_size)?;
    Ok(tape.value(loss).item())
}

pub fn count_trainable_params(model: &Model) -> usize {
    model.count_trainable_params()
}

/// One training example with its frozen computations cached.
#[derive(Clone, Debug)]
pub struct Sample {
    pub inputs: FrozenInputs,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn new(model: &Model, image: &Tensor, depth: &Tensor, labels: Vec<u8>) -> Result<Self> {
        Ok(Self {
            inputs: model.frozen_inputs(image, depth)?,
            labels,
        })
    }
}

/// Adaptive-moment state of every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: usize,
    /// `(parameter, first moment, second moment)` in store order.
    pub moments: Vec<(ParamId, Tensor, Tensor)>,
}

impl OptimState {
    pub fn new(model: &Model) -> Self {
        let moments = model
            .store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, Tensor::zeros(p.tensor.shape()), Tensor::zeros(p.tensor.shape())))
            .collect();
        Self { step: 0, moments }
    }
}

/// Data order: sample indices of the batch used at `step`.
///
/// Batches walk a seeded permutation of the dataset that is redrawn every
/// epoch, so the order is a pure function of `(seed, step)`.
pub fn batch_indices(seed: u64, step: usize, batch_size: usize, dataset_len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for j in 0..batch_size {
        let pos = step * batch_size + j;
        let epoch = pos / dataset_len;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..dataset_len).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64)));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("set above").1[pos % dataset_len]);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

struct SampleGrad {
    loss: f64,
    weight: f64,
    grads: Gradients,
}

fn feature_norms(tape: &Tape<'_>, layers: &[Var]) -> String {
    let mut s = String::new();
    for (i, &l) in layers.iter().enumerate() {
        let _ = write!(s, "{}layer{i}={:.4e}", if i > 0 { ", " } else { "" }, tape.value(l).norm());
    }
    s
}

fn sample_gradient(model: &Model, sample: &Sample) -> Result<SampleGrad> {
    let mut tape = Tape::new(&model.store);
    let out = model.forward(&mut tape, &sample.inputs)?;
    if !tape.value(out.logits).is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite logits; adapted feature norms: {}",
            feature_norms(&tape, &out.adapted.layers)
        )));
    }
    let (grid, patch) = (model.config.backbone.grid_side(), model.config.backbone.patch_size);
    let counts = label_counts(&sample.labels, grid, patch, model.num_classes())?;
    let weight = counts.iter().sum();
    let loss = tape.cross_entropy(out.logits, counts)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss; adapted feature norms: {}",
            feature_norms(&tape, &out.adapted.layers)
        )));
    }
    let grads = tape.backward(loss)?;
    Ok(SampleGrad { loss: value, weight, grads })
}

/// Batch loss and gradient: mean over all labelled pixels of the batch.
pub fn batch_gradient(model: &Model, batch: &[&Sample]) -> Result<(f64, Gradients)> {
    let per_sample: Vec<SampleGrad> = batch
        .par_iter()
        .map(|s| sample_gradient(model, s))
        .collect::<Result<_>>()?;
    let total: f64 = per_sample.iter().map(|s| s.weight).sum();
    let mut grads = Gradients::zeros_for(&model.store);
    let mut loss = 0.0;
    for mut s in per_sample {
        let share = s.weight / total;
        loss += share * s.loss;
        s.grads.scale(share);
        grads.accumulate(&s.grads);
    }
    Ok((loss, grads))
}

/// Owns the optimizer state of one training session.
pub struct Trainer {
    pub config: TrainConfig,
    pub optim: OptimState,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &Model) -> Result<Self> {
        config.validate()?;
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&t| t > 0)
            .unwrap_or(4);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            config,
            optim: OptimState::new(model),
            pool,
        })
    }

    /// Resumes from a saved optimizer state.
    pub fn with_state(config: TrainConfig, model: &Model, optim: OptimState) -> Result<Self> {
        let mut t = Self::new(config, model)?;
        let expected: Vec<ParamId> = t.optim.moments.iter().map(|m| m.0).collect();
        let got: Vec<ParamId> = optim.moments.iter().map(|m| m.0).collect();
        if expected != got {
            return Err(Error::Checkpoint("optimizer state does not match the model's trainable parameters".into()));
        }
        t.optim = optim;
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.optim.step
    }

    pub fn is_done(&self) -> bool {
        self.optim.step >= self.config.total_steps
    }

    /// One forward/backward pass over `batch` and one AdamW update.
    pub fn train_step(&mut self, model: &mut Model, batch: &[&Sample]) -> Result<StepStats> {
        let step = self.optim.step;
        let lr = lr_at_step(step, &self.config)?;
        let (loss, mut grads) = self.pool.install(|| batch_gradient(model, batch))?;
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {step}")));
        }
        if let Some(clip) = self.config.grad_clip {
            if grad_norm > clip {
                grads.scale(clip / grad_norm);
            }
        }
        self.apply(model, &grads, lr);
        self.optim.step += 1;
        Ok(StepStats { step, lr, loss, grad_norm })
    }

    fn apply(&mut self, model: &mut Model, grads: &Gradients, lr: f64) {
        let (b1, b2) = self.config.betas;
        let t = (self.optim.step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let decay = 1.0 - lr * self.config.weight_decay;
        let eps = self.config.adam_eps;
        for (id, m, v) in &mut self.optim.moments {
            let g = grads.get(*id).expect("trainable parameters always carry a gradient");
            let p = model.store.tensor_mut(*id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p *= decay;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }

    /// Trains until `total_steps`, calling `on_step` after every update.
    pub fn run<F>(&mut self, model: &mut Model, data: &[Sample], mut on_step: F) -> Result<Vec<StepStats>>
    where
        F: FnMut(&StepStats, &Model, &Trainer) -> Result<()>,
    {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mut history = Vec::new();
        while !self.is_done() {
            let idx = batch_indices(self.config.seed, self.optim.step, self.config.batch_size, data.len());
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let stats = self.train_step(model, &batch)?;
            on_step(&stats, model, self)?;
            history.push(stats);
        }
        Ok(history)
    }
}

/// Training log with columns `step,lr,loss,wall_ms`.
pub struct CsvLog {
    out: std::io::BufWriter<std::fs::File>,
    start: Instant,
    path: std::path::PathBuf,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        writeln!(out, "step,lr,loss,wall_ms").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out,
            start: Instant::now(),
            path: path.to_owned(),
        })
    }

    pub fn record(&mut self, stats: &StepStats) -> Result<()> {
        let ms = self.start.elapsed().as_millis();
        writeln!(self.out, "{},{:e},{:.9},{}", stats.step, stats.lr, stats.loss, ms).map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
