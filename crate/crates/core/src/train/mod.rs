//! Siamese training: the single-image and tiled branches share one
//! parameter set and one optimizer step per batch.

mod ablation;
mod sgd;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{row_name, run_ablation, AblationRow, AblationTable, EvalSettings, ABLATION_ROWS};
pub use sgd::Sgd;

use crate::data::{augment, AugmentationConfig, DatasetDescriptor};
use crate::error::{Error, Result};
use crate::losses::{alpha_at, puzzle_objective, AlphaSchedule, LossBreakdown, LossToggles};
use crate::model::{BackboneSpec, Classifier, Gradients};
use crate::LabelVector;

/// Abort when the batch loss exceeds this.
pub const DIVERGENCE_THRESHOLD: f64 = 1e4;

/// File names inside the output directory.
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone: BackboneSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub poly_power: f64,
    pub alpha: AlphaSchedule,
    pub augmentation: AugmentationConfig,
    pub toggles: LossToggles,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Write a log record every this many steps.
    pub log_interval: usize,
    /// Single worker, fixed order, no wall-clock values in the log.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            epochs: 15,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            alpha: AlphaSchedule::default(),
            augmentation: AugmentationConfig::default(),
            toggles: LossToggles::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/train"),
            log_interval: 10,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config("epochs, batch size and log interval must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.poly_power >= 0.0) {
            return Err(Error::Config("weight decay and poly power must be >= 0".into()));
        }
        self.backbone.validate()?;
        self.alpha.validate()?;
        self.augmentation.validate()?;
        let min = 2 * self.backbone.stride();
        if self.augmentation.crop_size < min {
            return Err(Error::Config(format!(
                "crop size {} is below twice the backbone stride ({min})",
                self.augmentation.crop_size
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub alpha: f64,
    pub learning_rate: f64,
    /// Seconds since training started; absent in deterministic mode.
    pub wall_time: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Classifier<f32>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<TrainLogRecord>,
    /// Mean batch losses of each epoch.
    pub epoch_means: Vec<LossBreakdown>,
}

/// Mixes a run seed with a purpose tag so that independent random streams
/// never share a key.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    // SplitMix64 finalizer.
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_TAG: u64 = 1;
const AUGMENT_TAG: u64 = 2;

/// Visiting order of every epoch: a seeded shuffle per epoch.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_TAG));
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

struct ItemResult {
    grads: Gradients<f32>,
    losses: LossBreakdown,
}

fn item_step(
    model: &Classifier<f32>,
    image: &Array3<f32>,
    labels: &LabelVector,
    cfg: &TrainConfig,
    sample: u64,
    alpha: f64,
    step: usize,
) -> Result<ItemResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, AUGMENT_TAG));
    rng.set_stream(sample);
    let input = augment(image.view(), &cfg.augmentation, &mut rng);

    let diverged = |e: Error| match e {
        Error::NonFinite(_) => Error::Divergence {
            step,
            loss: f64::NAN,
            last_good: None,
        },
        other => other,
    };
    let (single, single_trace) = model.forward_single_traced(input.view()).map_err(diverged)?;
    let puzzle = if cfg.toggles.needs_puzzle() {
        let (merged, _, trace) = model.forward_puzzle_traced(input.view()).map_err(diverged)?;
        Some((merged, trace))
    } else {
        None
    };
    let out = puzzle_objective(
        &single.raw_cams,
        puzzle.as_ref().map(|(m, _)| m),
        labels,
        cfg.toggles,
        alpha,
    )
    .map_err(diverged)?;

    let mut grads = model.zero_grads();
    model.backward_single(single_trace, &out.grad_single, &mut grads);
    if let (Some((_, trace)), Some(g)) = (puzzle, out.grad_merged.as_ref()) {
        model.backward_puzzle(trace, g, &mut grads);
    }
    Ok(ItemResult {
        grads,
        losses: out.breakdown,
    })
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.cls += b.cls / n;
        m.p_cls += b.p_cls / n;
        m.re += b.re / n;
        m.total += b.total / n;
    }
    m.alpha = items.first().map_or(0.0, |b| b.alpha);
    m
}

/// Trains a fresh model on `dataset` and writes the final checkpoint and the
/// log into `config.out_dir`.
pub fn train(config: &TrainConfig, dataset: &DatasetDescriptor) -> Result<TrainOutcome> {
    let model = Classifier::<f32>::new(config.backbone.clone(), dataset.num_classes(), config.seed)?;
    train_model(model, config, dataset)
}

/// Trains `model` in place of a fresh one.
pub fn train_model(
    mut model: Classifier<f32>,
    config: &TrainConfig,
    dataset: &DatasetDescriptor,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::shape(
            "model classes",
            format!("C = {}", dataset.num_classes()),
            format!("C = {}", model.num_classes()),
        ));
    }
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let last_good = out.join(LAST_GOOD_CHECKPOINT);
    let mut have_last_good = false;

    let images: Vec<Array3<f32>> = dataset
        .items()
        .iter()
        .map(|item| item.load_tensor())
        .collect::<Result<_>>()?;
    let labels: Vec<&LabelVector> = dataset.items().iter().map(|i| &i.labels).collect();

    let steps_per_epoch = config.steps_per_epoch(dataset.len());
    let total_steps = steps_per_epoch * config.epochs;
    let mut optimizer = Sgd::new(&model, config.momentum, config.weight_decay);
    let start = Instant::now();
    let mut records = Vec::new();
    let mut epoch_means = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, dataset.len());
        let mut batch_means = Vec::with_capacity(steps_per_epoch);
        for batch in order.chunks(config.batch_size) {
            let alpha = alpha_at(step, total_steps, &config.alpha);
            let lr = config.learning_rate * (1.0 - step as f64 / total_steps as f64).powf(config.poly_power);
            let first_sample = (step * config.batch_size) as u64;
            let run = |(k, &idx): (usize, &usize)| {
                item_step(
                    &model,
                    &images[idx],
                    labels[idx],
                    config,
                    first_sample + k as u64,
                    alpha,
                    step,
                )
            };
            let results: Vec<Result<ItemResult>> = if config.deterministic {
                batch.iter().enumerate().map(run).collect()
            } else {
                batch.par_iter().enumerate().map(run).collect()
            };

            let with_checkpoint = |e: Error| match e {
                Error::Divergence { step, loss, .. } => Error::Divergence {
                    step,
                    loss,
                    last_good: have_last_good.then(|| last_good.clone()),
                },
                other => other,
            };
            let mut grads = model.zero_grads();
            let mut losses = Vec::with_capacity(batch.len());
            for r in results {
                let r = r.map_err(with_checkpoint)?;
                grads.add_assign(&r.grads);
                losses.push(r.losses);
            }
            let mean = mean_breakdown(&losses);
            if !mean.total.is_finite() || mean.total > DIVERGENCE_THRESHOLD {
                return Err(with_checkpoint(Error::Divergence {
                    step,
                    loss: mean.total,
                    last_good: None,
                }));
            }
            grads.scale(1.0 / batch.len() as f32);
            optimizer.step(&mut model, &grads, lr);

            if step % config.log_interval == 0 {
                let record = TrainLogRecord {
                    step,
                    epoch,
                    losses: mean,
                    alpha,
                    learning_rate: lr,
                    wall_time: (!config.deterministic).then(|| start.elapsed().as_secs_f64()),
                };
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                records.push(record);
            }
            batch_means.push(mean);
            step += 1;
        }
        epoch_means.push(mean_breakdown(&batch_means));
        model.save_checkpoint(&last_good)?;
        have_last_good = true;
    }

    let checkpoint = out.join(FINAL_CHECKPOINT);
    model.save_checkpoint(&checkpoint)?;
    Ok(TrainOutcome {
        model,
        checkpoint,
        log: log_path,
        records,
        epoch_means,
    })
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests;
