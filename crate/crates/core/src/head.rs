//! Multi-head class-specific residual attention classifier.
//!
//! Features `[N,d,f,t]` are viewed as `P = f*t` position vectors. For each
//! head `h` with temperature `T_h` and class vectors `C^(h)`:
//!
//! ```text
//! s_j^i = softmax_j(T_h * x_j . C_i)          (one-hot argmax when T_h = inf)
//! a^i   = sum_j s_j^i x_j
//! g     = max_f mean_t x + mean_f mean_t x
//! z_i   = (g + lambda a^i) . C_i
//! ```
//!
//! and the final logits aggregate `z` over heads.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Element, Graph, ParameterSet, Tensor, Var};
use crate::data::{stream_rng, LabelVector};
use crate::error::{Error, Result};

pub const CLASSIFIER_PARAM: &str = "head.classifier";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TemperatureRepr", into = "TemperatureRepr")]
pub enum Temperature {
    Finite(f64),
    Infinite,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TemperatureRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<TemperatureRepr> for Temperature {
    type Error = String;

    fn try_from(r: TemperatureRepr) -> Result<Self, String> {
        let t = match r {
            TemperatureRepr::Number(v) => Temperature::Finite(v),
            TemperatureRepr::Text(s) if s == "inf" => Temperature::Infinite,
            TemperatureRepr::Text(s) => s
                .parse::<f64>()
                .map(Temperature::Finite)
                .map_err(|_| format!("temperature {s:?} is neither a number nor \"inf\""))?,
        };
        t.check().map_err(|e| e.to_string())?;
        Ok(t)
    }
}

impl From<Temperature> for TemperatureRepr {
    fn from(t: Temperature) -> Self {
        match t {
            Temperature::Finite(v) => TemperatureRepr::Number(v),
            Temperature::Infinite => TemperatureRepr::Text("inf".into()),
        }
    }
}

impl Temperature {
    fn check(self) -> Result<()> {
        match self {
            Temperature::Finite(v) if !(v > 0.0 && v.is_finite()) => {
                Err(Error::Config(format!("temperature {v} must be in (0, inf]")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Temperature::Finite(v) => write!(f, "{v}"),
            Temperature::Infinite => f.write_str("inf"),
        }
    }
}

/// Temperature sequence for `H ∈ {1, 2, 4, 6}`: `1, 2, ..., H-1, inf`
/// (just `1` for a single head).
pub fn default_temperatures(num_heads: usize) -> Result<Vec<Temperature>> {
    match num_heads {
        1 => Ok(vec![Temperature::Finite(1.0)]),
        2 | 4 | 6 => {
            let mut t: Vec<Temperature> = (1..num_heads).map(|v| Temperature::Finite(v as f64)).collect();
            t.push(Temperature::Infinite);
            Ok(t)
        }
        h => Err(Error::Config(format!("num_heads must be 1, 2, 4 or 6, got {h}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsraHeadConfig {
    pub num_classes: usize,
    pub num_heads: usize,
    /// Empty means the standard sequence for `num_heads`.
    pub temperatures: Vec<Temperature>,
    pub lambda: f64,
    pub feature_dim: usize,
    /// One classifier shared by every head instead of one per head.
    pub share_weights: bool,
    pub aggregation: HeadAggregation,
}

impl Default for CsraHeadConfig {
    fn default() -> Self {
        CsraHeadConfig {
            num_classes: 2,
            num_heads: 4,
            temperatures: Vec::new(),
            lambda: 0.1,
            feature_dim: 512,
            share_weights: false,
            aggregation: HeadAggregation::Mean,
        }
    }
}

impl CsraHeadConfig {
    pub fn resolved_temperatures(&self) -> Result<Vec<Temperature>> {
        if self.temperatures.is_empty() {
            return default_temperatures(self.num_heads);
        }
        if self.temperatures.len() != self.num_heads {
            return Err(Error::Config(format!(
                "{} temperatures for {} heads",
                self.temperatures.len(),
                self.num_heads
            )));
        }
        for t in &self.temperatures {
            t.check()?;
        }
        Ok(self.temperatures.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config(format!(
                "head needs positive num_classes, num_heads and feature_dim, got {self:?}"
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        self.resolved_temperatures().map(|_| ())
    }

    pub fn classifier_shape(&self) -> [usize; 3] {
        let heads = if self.share_weights { 1 } else { self.num_heads };
        [heads, self.num_classes, self.feature_dim]
    }
}

/// Class vectors `U(-1/sqrt(d), 1/sqrt(d))`.
pub fn init_head(cfg: &CsraHeadConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let shape = cfg.classifier_shape();
    let bound = (1.0 / (cfg.feature_dim as f64).sqrt()) as f32;
    let mut rng = stream_rng(seed, 11);
    let values = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut p = ParameterSet::new();
    p.insert(CLASSIFIER_PARAM, Tensor::new(&shape, values)?)?;
    Ok(p)
}

/// `[N,d,f,t]` to `[N,d,P]`.
pub fn flatten_positions<F: Element>(g: &mut Graph<F>, features: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    let [n, d, f, t] = s[..] else {
        return Err(Error::Shape(format!("feature map must be [N,d,f,t], got {s:?}")));
    };
    g.reshape(features, &[n, d, f * t])
}

/// Pre-softmax scores `x_j . C_i`: `[N,d,P]` and `[m,d]` to `[N,m,P]`.
pub fn position_logits<F: Element>(g: &mut Graph<F>, x: Var, classes: Var) -> Result<Var> {
    let (xs, cs) = (g.shape(x).to_vec(), g.shape(classes).to_vec());
    if xs.len() != 3 || cs.len() != 2 || xs[1] != cs[1] {
        return Err(Error::Shape(format!("positions {xs:?} vs class vectors {cs:?}")));
    }
    let c = g.expand(classes, 0, xs[0])?;
    g.matmul(c, x)
}

/// Attention over positions, `[N,m,P]`, rows summing to one.
pub fn attention_scores<F: Element>(g: &mut Graph<F>, x: Var, classes: Var, t: Temperature) -> Result<Var> {
    t.check()?;
    let logits = position_logits(g, x, classes)?;
    match t {
        Temperature::Finite(v) => {
            let scaled = g.scale(logits, F::from_f64_lossy(v))?;
            g.softmax(scaled, 2)
        }
        Temperature::Infinite => g.onehot_argmax(logits, 2),
    }
}

/// `a^i = sum_k s_k^i x_k`: `[N,m,P]` and `[N,d,P]` to `[N,m,d]`.
pub fn class_feature<F: Element>(g: &mut Graph<F>, scores: Var, x: Var) -> Result<Var> {
    let xt = g.transpose(x)?;
    g.matmul(scores, xt)
}

/// `max_f mean_t R + mean_f mean_t R`: `[N,d,f,t]` to `[N,d]`.
pub fn global_feature<F: Element>(g: &mut Graph<F>, features: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("feature map must be [N,d,f,t], got {s:?}")));
    }
    let m = g.mean_axis(features, 3)?;
    let gmp = g.max_axis(m, 2)?;
    let gap = g.mean_axis(m, 2)?;
    g.add(gmp, gap)
}

/// Logits `[N,m]` of one head.
pub fn head_logits<F: Element>(
    g: &mut Graph<F>,
    x: Var,
    global: Var,
    classes: Var,
    t: Temperature,
    lambda: f64,
) -> Result<Var> {
    let n = g.shape(x)[0];
    let m = g.shape(classes)[0];
    let s = attention_scores(g, x, classes, t)?;
    let a = class_feature(g, s, x)?;
    let a = g.scale(a, F::from_f64_lossy(lambda))?;
    let gm = g.expand(global, 1, m)?;
    let f = g.add(gm, a)?;
    let c = g.expand(classes, 0, n)?;
    let prod = g.mul(f, c)?;
    g.sum_axis(prod, 2)
}

pub fn csra_logits<F: Element>(
    g: &mut Graph<F>,
    params: &ParameterSet<F>,
    cfg: &CsraHeadConfig,
    features: Var,
) -> Result<Var> {
    let temps = cfg.resolved_temperatures()?;
    let fs = g.shape(features).to_vec();
    if fs.len() != 4 || fs[1] != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "feature map {fs:?} does not match head feature_dim {}",
            cfg.feature_dim
        )));
    }
    let expected = cfg.classifier_shape();
    let classifier = g.param(params, CLASSIFIER_PARAM)?;
    if g.shape(classifier) != expected {
        return Err(Error::Shape(format!(
            "{CLASSIFIER_PARAM} has shape {:?}, head config needs {expected:?}",
            g.shape(classifier)
        )));
    }
    let x = flatten_positions(g, features)?;
    let global = global_feature(g, features)?;
    let mut total: Option<Var> = None;
    for (h, &t) in temps.iter().enumerate() {
        let c = g.select(classifier, if cfg.share_weights { 0 } else { h })?;
        let z = head_logits(g, x, global, c, t, cfg.lambda)?;
        total = Some(match total {
            None => z,
            Some(acc) => g.add(acc, z)?,
        });
    }
    let total = total.expect("at least one head");
    match cfg.aggregation {
        HeadAggregation::Sum => Ok(total),
        HeadAggregation::Mean => g.scale(total, F::from_f64_lossy(1.0 / temps.len() as f64)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelPrediction {
    pub probabilities: [f64; 2],
    pub labels: LabelVector,
}

/// `p = sigmoid(logit)`, label 1 when `p >= tau`. `logits` is row-major `[N,2]`.
pub fn predict_labels(logits: &[f32], tau: f64) -> Result<Vec<LabelPrediction>> {
    if logits.len() % 2 != 0 {
        return Err(Error::Shape(format!("{} logits do not form [N,2]", logits.len())));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {v}")));
    }
    logits
        .chunks(2)
        .map(|row| {
            let p = [sigmoid(f64::from(row[0])), sigmoid(f64::from(row[1]))];
            let labels = LabelVector::new(u8::from(p[0] >= tau), u8::from(p[1] >= tau))?;
            Ok(LabelPrediction {
                probabilities: p,
                labels,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_sequences() {
        let inf = Temperature::Infinite;
        let f = Temperature::Finite;
        assert_eq!(default_temperatures(1).unwrap(), vec![f(1.0)]);
        assert_eq!(default_temperatures(2).unwrap(), vec![f(1.0), inf]);
        assert_eq!(default_temperatures(4).unwrap(), vec![f(1.0), f(2.0), f(3.0), inf]);
        assert_eq!(default_temperatures(6).unwrap().len(), 6);
        assert!(default_temperatures(3).is_err());
    }

    #[test]
    fn temperature_serde() {
        let t: Vec<Temperature> = serde_json::from_str(r#"[1, 2.5, "inf"]"#).unwrap();
        assert_eq!(t, vec![Temperature::Finite(1.0), Temperature::Finite(2.5), Temperature::Infinite]);
        assert_eq!(serde_json::to_string(&t).unwrap(), r#"[1.0,2.5,"inf"]"#);
        assert!(serde_json::from_str::<Temperature>("0").is_err());
        assert!(serde_json::from_str::<Temperature>(r#""hot""#).is_err());
    }

    #[test]
    fn decision_rule() {
        let p = predict_labels(&[-10.0, 10.0, 0.0, 0.0, 3.0, -3.0], 0.5).unwrap();
        assert_eq!(p[0].labels.bits(), [0, 1]);
        assert_eq!(p[1].labels.bits(), [1, 1]);
        assert_eq!(p[1].probabilities, [0.5, 0.5]);
        assert_eq!(p[2].labels.bits(), [1, 0]);
        assert!((p[2].probabilities[0] - 0.9526).abs() < 1e-4);
        assert!(predict_labels(&[f32::NAN, 0.0], 0.5).is_err());
    }
}
