//! CNN6-style feature extractor: `[N,1,64,256]` log-mel images to
//! `[N,d,f,t]` feature maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, BatchNormStats, Element, Graph, ParameterSet, Tensor, Var};
use crate::data::stream_rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub padding: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Dataset-level standardization of log-mel values, set by `prepare`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![64, 128, 256, 512],
            in_channels: 1,
            kernel_size: 5,
            padding: 2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            input_mean: 0.0,
            input_std: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) || self.in_channels == 0 {
            return Err(Error::Config(format!(
                "backbone widths {:?} and in_channels {} must be positive and non-empty",
                self.widths, self.in_channels
            )));
        }
        if self.kernel_size == 0 || 2 * self.padding + 1 != self.kernel_size {
            return Err(Error::Config(format!(
                "backbone kernel {} with padding {} does not preserve spatial size",
                self.kernel_size, self.padding
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return Err(Error::Config(format!(
                "batchnorm momentum {} / eps {} out of range",
                self.bn_momentum, self.bn_eps
            )));
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite() && self.input_mean.is_finite()) {
            return Err(Error::Config(format!(
                "input normalization mean {} / std {} invalid",
                self.input_mean, self.input_std
            )));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.widths.len()
    }

    /// Channel width `d` of the produced feature map.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    /// `(f, t)` of the feature map for an input of `h x w`.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let div = 1usize << self.blocks();
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by 2^{} = {div}",
                self.blocks()
            )));
        }
        Ok((h / div, w / div))
    }

    /// Closed form of the number of trainable values.
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let mut c_in = self.in_channels;
        let mut total = 0;
        for &c_out in &self.widths {
            total += c_out * c_in * k2 + 2 * c_out;
            c_in = c_out;
        }
        total
    }

    pub fn normalize_input(&self, values: &mut [f32]) {
        let (mean, inv) = (self.input_mean, 1.0 / self.input_std);
        values.iter_mut().for_each(|v| *v = ((f64::from(*v) - mean) * inv) as f32);
    }
}

pub fn conv_weight_name(block: usize) -> String {
    format!("backbone.block{block}.conv.weight")
}

pub fn bn_prefix(block: usize) -> String {
    format!("backbone.block{block}.bn")
}

/// Conv weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, batchnorm `γ = 1`,
/// `β = 0`.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, 10);
    let mut params = ParameterSet::new();
    let k = cfg.kernel_size;
    let mut c_in = cfg.in_channels;
    for (b, &c_out) in cfg.widths.iter().enumerate() {
        let fan_in = c_in * k * k;
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let w: Vec<f32> = (0..c_out * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
        params.insert(conv_weight_name(b), Tensor::new(&[c_out, c_in, k, k], w)?)?;
        let bn = bn_prefix(b);
        params.insert(format!("{bn}.gamma"), Tensor::full(&[c_out], 1.0))?;
        params.insert(format!("{bn}.beta"), Tensor::zeros(&[c_out]))?;
        c_in = c_out;
    }
    Ok(params)
}

/// Fresh running statistics (mean 0, variance 1) for every block.
pub fn init_running_stats<F: Element>(cfg: &BackboneConfig) -> Vec<BatchNormStats<F>> {
    cfg.widths.iter().map(|&c| BatchNormStats::new(c)).collect()
}

/// Whether batchnorm layers use batch statistics (and update the running
/// ones) or the stored running statistics.
pub enum StatsMode<'a, F: Element> {
    Train(&'a mut [BatchNormStats<F>]),
    Eval(&'a [BatchNormStats<F>]),
}

/// conv → batchnorm → relu → 2x2 average pool, per block.
pub fn forward_features<F: Element>(
    g: &mut Graph<F>,
    params: &ParameterSet<F>,
    cfg: &BackboneConfig,
    input: Var,
    mut mode: StatsMode<'_, F>,
) -> Result<Var> {
    let shape = g.shape(input).to_vec();
    let [_, c, h, w] = shape[..] else {
        return Err(Error::Shape(format!("backbone input must be [N,C,H,W], got {shape:?}")));
    };
    if c != cfg.in_channels {
        return Err(Error::Shape(format!(
            "backbone input has {c} channels, config expects {}",
            cfg.in_channels
        )));
    }
    cfg.output_dims(h, w)?;
    let n_stats = match &mode {
        StatsMode::Train(s) => s.len(),
        StatsMode::Eval(s) => s.len(),
    };
    if n_stats != cfg.blocks() {
        return Err(Error::Shape(format!(
            "{n_stats} running-stat sets for {} blocks",
            cfg.blocks()
        )));
    }
    let momentum = F::from_f64_lossy(cfg.bn_momentum);
    let eps = F::from_f64_lossy(cfg.bn_eps);
    let mut x = input;
    for b in 0..cfg.blocks() {
        let kernel = g.param(params, &conv_weight_name(b))?;
        x = g.conv2d(x, kernel, None, 1, cfg.padding)?;
        let bn = bn_prefix(b);
        let gamma = g.param(params, &format!("{bn}.gamma"))?;
        let beta = g.param(params, &format!("{bn}.beta"))?;
        let bn_mode = match &mut mode {
            StatsMode::Train(s) => BatchNormMode::Train {
                stats: &mut s[b],
                momentum,
            },
            StatsMode::Eval(s) => BatchNormMode::Eval { stats: &s[b] },
        };
        x = g.batchnorm2d(x, gamma, beta, bn_mode, eps)?;
        x = g.relu(x)?;
        x = g.avg_pool2(x)?;
    }
    Ok(x)
}
