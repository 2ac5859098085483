//! Mini-batch training: masking, BCE or cross-entropy loss, Adam with a
//! cosine schedule, per-epoch logs and checkpoints.

mod checkpoint;
mod features;
mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use features::{extract_features, FeatureSet, Normalization, NORMALIZATION_FILE};
pub use optim::{cosine_lr, Adam, AdamConfig, Moments};

use crate::autodiff::{Element, Graph, Tensor, Var};
use crate::data::{stream_rng, LabelVector};
use crate::dsp::{draw_masks, fill_rects, MaskSpec};
use crate::error::{Error, Result};
use crate::metrics::{confusion, icbhi_metrics, MetricsReport};
use crate::model::{LossMode, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eta_min: f64,
    pub seed: u64,
    /// Apply the masks to training batches.
    pub augment: bool,
    pub masks: MaskSpec,
    pub adam: AdamConfig,
    /// Share of training patients held out for per-epoch validation.
    pub validation_fraction: f64,
    /// Worker threads for feature extraction; 1 is the reproducible mode.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 50,
            eta_min: 0.0,
            seed: 7,
            augment: true,
            masks: MaskSpec::default(),
            adam: AdamConfig::default(),
            validation_fraction: 0.0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.learning_rate) {
            return bad("eta_min must lie in [0, learning_rate]");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.threads == 0 {
            return bad("batch_size, epochs and threads must be positive");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(a.weight_decay >= 0.0 && a.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be non-negative");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }
}

/// Mean BCE over batch and labels, from logits `[N, 2]`.
pub fn bce_loss<F: Element>(g: &mut Graph<F>, logits: Var, labels: &[LabelVector]) -> Result<Var> {
    let bit = |b: bool| if b { F::one() } else { F::zero() };
    let targets: Vec<F> = labels.iter().flat_map(|l| [bit(l.crackle), bit(l.wheeze)]).collect();
    let t = Tensor::new(&[labels.len(), 2], targets)?;
    g.bce_with_logits(logits, &t)
}

/// Mean cross-entropy of logits `[N, 4]` against the four-class ids.
pub fn cross_entropy_loss<F: Element>(g: &mut Graph<F>, logits: Var, labels: &[LabelVector]) -> Result<Var> {
    let ids: Vec<usize> = labels.iter().map(|l| l.class().index()).collect();
    g.cross_entropy(logits, &ids)
}

pub fn loss_for<F: Element>(mode: LossMode, g: &mut Graph<F>, logits: Var, labels: &[LabelVector]) -> Result<Var> {
    match mode {
        LossMode::MultilabelBce => bce_loss(g, logits, labels),
        LossMode::SinglelabelCe => cross_entropy_loss(g, logits, labels),
    }
}

/// Seed of the masks of one sample in one epoch.
pub fn mask_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Visiting order of the training set in one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 1000 + epoch as u64));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub steps: u64,
    pub batch_losses: Vec<f32>,
    pub wall_seconds: f64,
    pub validation: Option<MetricsReport>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,mean_train_loss,lr_start,lr_end";

impl EpochLog {
    /// CSV row without the wall-clock time, which lives in its own file so
    /// the log stays reproducible.
    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{:.8},{:e},{:e}", self.epoch, self.mean_loss, self.lr_start, self.lr_end);
        if let Some(v) = &self.validation {
            let f = |x: Option<f64>| x.map_or_else(|| "nan".into(), |x| format!("{x:.6}"));
            let _ = write!(row, ",{},{},{}", f(v.specificity), f(v.sensitivity), f(v.score));
        }
        row
    }
}

pub fn train_log_header(with_validation: bool) -> String {
    if with_validation {
        format!("{TRAIN_LOG_HEADER},val_specificity,val_sensitivity,val_score")
    } else {
        TRAIN_LOG_HEADER.to_string()
    }
}

/// Stops glibc from serving the large per-step activation buffers with
/// fresh mmaps. Each such buffer is otherwise page-faulted in and zeroed by
/// the kernel on every step, which costs about a tenth of the training time.
pub fn keep_heap_mapped() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub total_steps: u64,
    pub epochs_done: usize,
}

impl Trainer {
    /// The cosine horizon covers `epochs` passes over `n_train` samples.
    pub fn new(model: Model, config: TrainConfig, n_train: usize) -> Result<Self> {
        config.validate()?;
        keep_heap_mapped();
        if n_train == 0 {
            return Err(Error::Validation("training set is empty".into()));
        }
        let total_steps = config.epochs as u64 * config.steps_per_epoch(n_train);
        Ok(Trainer {
            model,
            optimizer: Adam::new(config.adam),
            config,
            total_steps,
            epochs_done: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.optimizer.step, self.total_steps, self.config.learning_rate, self.config.eta_min)
    }

    /// One optimizer step on the given normalized images.
    pub fn step(&mut self, images: Vec<f32>, labels: &[LabelVector]) -> Result<f32> {
        let (h, w) = self.model.config.input_dims();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[labels.len(), 1, h, w], images)?)?;
        let z = self.model.forward(&mut g, x, true)?;
        let loss = loss_for(self.model.config.loss_mode, &mut g, z, labels)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {value}")));
        }
        self.model.params.zero_grads();
        g.backward(loss, &mut self.model.params)?;
        let lr = self.current_lr();
        self.optimizer.update(&mut self.model.params, lr)?;
        Ok(value)
    }

    /// One pass over `data` (already normalized) in seeded order, the last
    /// partial batch included.
    pub fn train_epoch(&mut self, data: &FeatureSet) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let start = Instant::now();
        let epoch = self.epochs_done;
        let cfg = self.config.clone();
        let order = epoch_order(cfg.seed, epoch, data.len());
        let per = data.image_len();
        let lr_start = self.current_lr();
        let mut lr_end = lr_start;
        let mut weighted = 0f64;
        let mut batch_losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(batch.len() * per);
            for &i in batch {
                let from = images.len();
                images.extend_from_slice(data.image(i));
                if cfg.augment {
                    let rects = draw_masks(&cfg.masks, data.n_mels, data.n_frames, mask_seed(cfg.seed, epoch, i))?;
                    fill_rects(&mut images[from..], data.n_frames, &rects, cfg.masks.fill_value);
                }
            }
            let labels: Vec<LabelVector> = batch.iter().map(|&i| data.labels[i]).collect();
            lr_end = self.current_lr();
            let loss = self.step(images, &labels).map_err(|e| match e {
                Error::NonFinite(m) | Error::Numerical(m) => Error::NonFinite(format!(
                    "epoch {epoch}, step {}, samples {batch:?}: {m}",
                    self.optimizer.step
                )),
                other => other,
            })?;
            weighted += f64::from(loss) * batch.len() as f64;
            batch_losses.push(loss);
        }
        self.epochs_done += 1;
        Ok(EpochLog {
            epoch,
            mean_loss: weighted / data.len() as f64,
            lr_start,
            lr_end,
            steps: batch_losses.len() as u64,
            batch_losses,
            wall_seconds: start.elapsed().as_secs_f64(),
            validation: None,
        })
    }
}

/// Eval-mode metrics of `model` on normalized features.
pub fn evaluate_features(model: &Model, data: &FeatureSet) -> Result<(MetricsReport, Vec<crate::model::Prediction>)> {
    let preds = model.predict(&data.images)?;
    let predicted: Vec<LabelVector> = preds.iter().map(|p| p.labels).collect();
    let cm = confusion(&data.labels, &predicted)?;
    Ok((icbhi_metrics(&cm)?, preds))
}

/// Splits training features into (train, validation) by whole patients.
pub fn validation_carve_out(data: &FeatureSet, fraction: f64, seed: u64) -> (FeatureSet, Option<FeatureSet>) {
    if fraction <= 0.0 {
        return (data.clone(), None);
    }
    let mut patients: Vec<u32> = data.patients.clone();
    patients.sort_unstable();
    patients.dedup();
    patients.shuffle(&mut stream_rng(seed, 12));
    let target = (fraction * data.len() as f64).round() as usize;
    let mut held = std::collections::BTreeSet::new();
    let mut count = 0;
    for p in patients {
        if count >= target {
            break;
        }
        count += data.patients.iter().filter(|&&q| q == p).count();
        held.insert(p);
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| held.contains(&data.patients[i]));
    if val.is_empty() || train.is_empty() {
        return (data.clone(), None);
    }
    (data.subset(&train), Some(data.subset(&val)))
}
