//! Flat run configuration: a TOML file plus `--key value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::SynthDatasetConfig;
use crate::dsp::{EdgePadding, FrontendConfig, MaskSpec, MelScale, StftConfig, WindowKind};
use crate::error::{Error, Result};
use crate::head::{CsraHeadConfig, HeadAggregation, Temperature};
use crate::model::{LossMode, ModelConfig};
use crate::train::{AdamConfig, Normalization, TrainConfig};

/// Every tunable of a run. Keys are the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds splits, initialization, shuffles and masks.
    pub seed: u64,
    /// Feature-extraction workers. 1 gives bit-reproducible runs.
    pub threads: usize,

    /// Patient-disjoint split: "official" (split file) or a train fraction such as "0.6".
    pub split: String,
    /// Split file for "official"; relative paths resolve against the data dir.
    pub split_file: String,

    pub sample_rate_hz: u32,
    pub padded_len: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub mel_scale: MelScale,
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub edge_padding: EdgePadding,
    pub log_floor: f64,

    pub augment: bool,
    pub time_masks: usize,
    pub max_time_frames: usize,
    pub freq_masks: usize,
    pub max_freq_bins: usize,
    pub mask_fill: f32,

    /// Output channels of each conv block.
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    pub conv_padding: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,

    pub num_heads: usize,
    /// Empty selects the standard sequence; "inf" is the max-pooling head.
    pub temperatures: Vec<Temperature>,
    pub lambda: f64,
    pub share_head_weights: bool,
    pub head_aggregation: HeadAggregation,
    pub threshold: f64,

    pub loss_mode: LossMode,
    pub learning_rate: f64,
    pub eta_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub validation_fraction: f64,

    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_sample_rate_hz: u32,
    pub synth_min_cycle_ms: u32,
    pub synth_max_cycle_ms: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fe = FrontendConfig::default();
        let masks = MaskSpec::default();
        let bb = BackboneConfig::default();
        let head = CsraHeadConfig::default();
        let tr = TrainConfig::default();
        let synth = SynthDatasetConfig::default();
        RunConfig {
            seed: tr.seed,
            threads: 1,
            split: "official".into(),
            split_file: String::new(),
            sample_rate_hz: fe.sample_rate_hz,
            padded_len: fe.padded_len,
            n_mels: fe.n_mels,
            fmin_hz: fe.fmin_hz,
            fmax_hz: fe.fmax_hz,
            mel_scale: fe.mel_scale,
            fft_size: fe.stft.fft_size,
            hop: fe.stft.hop,
            window: fe.stft.window,
            edge_padding: fe.stft.padding,
            log_floor: fe.stft.log_floor,
            augment: tr.augment,
            time_masks: masks.time_masks,
            max_time_frames: masks.max_time_frames,
            freq_masks: masks.freq_masks,
            max_freq_bins: masks.max_freq_bins,
            mask_fill: masks.fill_value,
            widths: bb.widths,
            kernel_size: bb.kernel_size,
            conv_padding: bb.padding,
            bn_momentum: bb.bn_momentum,
            bn_eps: bb.bn_eps,
            num_heads: head.num_heads,
            temperatures: head.temperatures,
            lambda: head.lambda,
            share_head_weights: head.share_weights,
            head_aggregation: head.aggregation,
            threshold: 0.5,
            loss_mode: LossMode::MultilabelBce,
            learning_rate: tr.learning_rate,
            eta_min: tr.eta_min,
            batch_size: tr.batch_size,
            epochs: tr.epochs,
            weight_decay: tr.adam.weight_decay,
            grad_clip: tr.adam.grad_clip,
            adam_beta1: tr.adam.beta1,
            adam_beta2: tr.adam.beta2,
            adam_eps: tr.adam.eps,
            validation_fraction: tr.validation_fraction,
            synth_train_per_class: synth.train_per_class,
            synth_test_per_class: synth.test_per_class,
            synth_sample_rate_hz: synth.sample_rate_hz,
            synth_min_cycle_ms: synth.min_cycle_ms,
            synth_max_cycle_ms: synth.max_cycle_ms,
        }
    }
}

/// Parses a command-line value as TOML (`5`, `1e-3`, `[4, 8]`, `true`),
/// falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// File values (if any), then overrides, then defaults for the rest.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            table.insert(key.replace('-', "_"), override_value(raw));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.split_mode_kind()?;
        self.model_config(None).validate()?;
        self.train_config().validate()
    }

    /// `None` for the official split, `Some(ratio)` otherwise.
    pub fn split_mode_kind(&self) -> Result<Option<f64>> {
        if self.split == "official" {
            return Ok(None);
        }
        match self.split.parse::<f64>() {
            Ok(r) if r > 0.0 && r < 1.0 => Ok(Some(r)),
            _ => Err(Error::Config(format!("split {:?}: expected \"official\" or a fraction in (0, 1)", self.split))),
        }
    }

    pub fn frontend_config(&self) -> FrontendConfig {
        FrontendConfig {
            sample_rate_hz: self.sample_rate_hz,
            padded_len: self.padded_len,
            n_mels: self.n_mels,
            fmin_hz: self.fmin_hz,
            fmax_hz: self.fmax_hz,
            mel_scale: self.mel_scale,
            stft: StftConfig {
                fft_size: self.fft_size,
                hop: self.hop,
                window: self.window,
                padding: self.edge_padding,
                log_floor: self.log_floor,
            },
        }
    }

    pub fn model_config(&self, normalization: Option<&Normalization>) -> ModelConfig {
        let backbone = BackboneConfig {
            widths: self.widths.clone(),
            kernel_size: self.kernel_size,
            padding: self.conv_padding,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
            input_mean: normalization.map_or(0.0, |n| n.mean),
            input_std: normalization.map_or(1.0, |n| n.std),
            ..BackboneConfig::default()
        };
        let head = CsraHeadConfig {
            num_classes: self.loss_mode.num_outputs(),
            num_heads: self.num_heads,
            temperatures: self.temperatures.clone(),
            lambda: self.lambda,
            feature_dim: backbone.feature_dim(),
            share_weights: self.share_head_weights,
            aggregation: self.head_aggregation,
        };
        ModelConfig {
            frontend: self.frontend_config(),
            backbone,
            head,
            loss_mode: self.loss_mode,
            threshold: self.threshold,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            eta_min: self.eta_min,
            seed: self.seed,
            augment: self.augment,
            masks: MaskSpec {
                time_masks: self.time_masks,
                max_time_frames: self.max_time_frames,
                freq_masks: self.freq_masks,
                max_freq_bins: self.max_freq_bins,
                fill_value: self.mask_fill,
            },
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
                grad_clip: self.grad_clip,
            },
            validation_fraction: self.validation_fraction,
            threads: self.threads,
        }
    }

    pub fn synth_config(&self) -> SynthDatasetConfig {
        SynthDatasetConfig {
            train_per_class: self.synth_train_per_class,
            test_per_class: self.synth_test_per_class,
            sample_rate_hz: self.synth_sample_rate_hz,
            min_cycle_ms: self.synth_min_cycle_ms,
            max_cycle_ms: self.synth_max_cycle_ms,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let cfg = RunConfig::resolve(None, &[("epochs".into(), "3".into()), ("loss-mode".into(), "singlelabel_ce".into())]).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.loss_mode, LossMode::SinglelabelCe);
        assert_eq!(cfg.model_config(None).head.num_classes, 4);
        let err = RunConfig::resolve(None, &[("epochz".into(), "3".into())]).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::resolve(None, &[("temperatures".into(), "[1, \"inf\"]".into()), ("num_heads".into(), "2".into())]).unwrap();
        let path = std::env::temp_dir().join(format!("mb_cfg_{}.toml", std::process::id()));
        std::fs::write(&path, cfg.to_toml()).unwrap();
        let back = RunConfig::resolve(Some(&path), &[]).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(back, cfg);
    }
}
