//! Backbone and attention head composed into one classifier.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormStats, Graph, ParameterSet, Tensor, Var};
use crate::backbone::{forward_features, init_backbone, init_running_stats, BackboneConfig, StatsMode};
use crate::data::{CycleClass, LabelVector};
use crate::dsp::FrontendConfig;
use crate::error::{Error, Result};
use crate::head::{csra_logits, init_head, predict_labels, CsraHeadConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Two sigmoid outputs (crackle, wheeze) trained with BCE.
    MultilabelBce,
    /// Four softmax outputs, one per class, trained with cross-entropy.
    SinglelabelCe,
}

impl LossMode {
    pub fn num_outputs(self) -> usize {
        match self {
            LossMode::MultilabelBce => 2,
            LossMode::SinglelabelCe => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub backbone: BackboneConfig,
    pub head: CsraHeadConfig,
    pub loss_mode: LossMode,
    /// Decision threshold on sigmoid outputs.
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frontend: FrontendConfig::default(),
            backbone: BackboneConfig::default(),
            head: CsraHeadConfig::default(),
            loss_mode: LossMode::MultilabelBce,
            threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        if self.head.feature_dim != self.backbone.feature_dim() {
            return Err(Error::Config(format!(
                "head feature_dim {} differs from the backbone output width {}",
                self.head.feature_dim,
                self.backbone.feature_dim()
            )));
        }
        if self.head.num_classes != self.loss_mode.num_outputs() {
            return Err(Error::Config(format!(
                "loss mode {:?} needs {} head outputs, config has {}",
                self.loss_mode,
                self.loss_mode.num_outputs(),
                self.head.num_classes
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must be in (0, 1)", self.threshold)));
        }
        self.backbone.output_dims(self.frontend.n_mels, self.frontend.n_frames())?;
        Ok(())
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.frontend.n_mels, self.frontend.n_frames())
    }
}

/// Decision for one cycle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub class: CycleClass,
    pub labels: LabelVector,
    /// Sigmoid outputs (crackle, wheeze), or the four softmax outputs.
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub stats: Vec<BatchNormStats>,
}

/// Eval-mode batches are cut to this size to bound activation memory.
const EVAL_CHUNK: usize = 16;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = init_backbone(&config.backbone, seed)?;
        for (name, t) in init_head(&config.head, seed)?.iter() {
            params.insert(name, t.clone())?;
        }
        let stats = init_running_stats(&config.backbone);
        Ok(Model { config, params, stats })
    }

    /// Logits `[N, outputs]` for already normalized images `[N,1,H,W]`.
    pub fn forward(&mut self, g: &mut Graph, input: Var, train: bool) -> Result<Var> {
        let mode = if train {
            StatsMode::Train(&mut self.stats)
        } else {
            StatsMode::Eval(&self.stats)
        };
        let features = forward_features(g, &self.params, &self.config.backbone, input, mode)?;
        csra_logits(g, &self.params, &self.config.head, features)
    }

    /// Eval-mode logits for `n` normalized images stored back to back.
    pub fn logits(&self, images: &[f32]) -> Result<Vec<f32>> {
        let (h, w) = self.config.input_dims();
        let per = h * w;
        if images.len() % per != 0 {
            return Err(Error::Shape(format!("{} values are not a whole number of {h}x{w} images", images.len())));
        }
        let mut out = Vec::with_capacity(images.len() / per * self.config.loss_mode.num_outputs());
        for chunk in images.chunks(EVAL_CHUNK * per) {
            let n = chunk.len() / per;
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[n, 1, h, w], chunk.to_vec())?)?;
            let features = forward_features(&mut g, &self.params, &self.config.backbone, x, StatsMode::Eval(&self.stats))?;
            let z = csra_logits(&mut g, &self.params, &self.config.head, features)?;
            out.extend_from_slice(g.value(z).data());
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[f32]) -> Result<Vec<Prediction>> {
        let logits = self.logits(images)?;
        decide(&logits, self.config.loss_mode, self.config.threshold)
    }
}

/// Turns logits into decisions according to the loss mode.
pub fn decide(logits: &[f32], mode: LossMode, threshold: f64) -> Result<Vec<Prediction>> {
    match mode {
        LossMode::MultilabelBce => Ok(predict_labels(logits, threshold)?
            .into_iter()
            .map(|p| Prediction {
                class: p.labels.class(),
                labels: p.labels,
                probabilities: p.probabilities.to_vec(),
            })
            .collect()),
        LossMode::SinglelabelCe => {
            if logits.len() % 4 != 0 {
                return Err(Error::Shape(format!("{} logits do not form [N,4]", logits.len())));
            }
            logits
                .chunks(4)
                .map(|row| {
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("logits {row:?}")));
                    }
                    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let e: Vec<f64> = row.iter().map(|&v| f64::from(v - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let probabilities: Vec<f64> = e.iter().map(|v| v / z).collect();
                    let mut best = 0;
                    for k in 1..4 {
                        if row[k] > row[best] {
                            best = k;
                        }
                    }
                    let class = CycleClass::from_index(best)?;
                    Ok(Prediction {
                        class,
                        labels: LabelVector::from_class(class),
                        probabilities,
                    })
                })
                .collect()
        }
    }
}
