use std::thread;

use serde::{Deserialize, Serialize};

use crate::data::{BreathCycle, LabelVector};
use crate::dsp::{Frontend, FrontendConfig};
use crate::error::{Error, Result};

/// Log-mel images of a set of cycles, stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub n_mels: usize,
    pub n_frames: usize,
    pub images: Vec<f32>,
    pub labels: Vec<LabelVector>,
    /// Patient of each image, for patient-disjoint carve-outs.
    pub patients: Vec<u32>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.n_mels * self.n_frames
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn subset(&self, indices: &[usize]) -> FeatureSet {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        FeatureSet {
            n_mels: self.n_mels,
            n_frames: self.n_frames,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            patients: indices.iter().map(|&i| self.patients[i]).collect(),
        }
    }
}

/// Runs the frontend over every cycle; `threads > 1` splits the work, the
/// result is identical for any thread count.
pub fn extract_features(frontend: &Frontend, cycles: &[BreathCycle], threads: usize) -> Result<FeatureSet> {
    let cfg = frontend.config();
    let (n_mels, n_frames) = (cfg.n_mels, cfg.n_frames());
    let per = n_mels * n_frames;
    let mut images = vec![0f32; cycles.len() * per];
    let threads = threads.max(1).min(cycles.len().max(1));
    let chunk = cycles.len().div_ceil(threads).max(1);
    thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = cycles
            .chunks(chunk)
            .zip(images.chunks_mut(chunk * per))
            .map(|(cs, out)| {
                s.spawn(move || -> Result<()> {
                    for (c, dst) in cs.iter().zip(out.chunks_mut(per)) {
                        let spec = frontend.process(&c.waveform).map_err(|e| {
                            Error::Validation(format!("{} cycle at {:.3}s: {e}", c.meta, c.annotation.start_s))
                        })?;
                        dst.copy_from_slice(spec.values());
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("feature worker panicked")?;
        }
        Ok(())
    })?;
    Ok(FeatureSet {
        n_mels,
        n_frames,
        images,
        labels: cycles.iter().map(BreathCycle::labels).collect(),
        patients: cycles.iter().map(|c| c.meta.patient_id).collect(),
    })
}

/// Dataset-level standardization constants of log-mel values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
    pub count: u64,
    /// Frontend the statistics were measured with.
    pub frontend: FrontendConfig,
}

pub const NORMALIZATION_FILE: &str = "normalization.json";

impl Normalization {
    pub fn measure(features: &FeatureSet, frontend: &FrontendConfig) -> Result<Self> {
        if features.images.is_empty() {
            return Err(Error::Validation("cannot measure normalization on an empty set".into()));
        }
        let n = features.images.len() as f64;
        let mean = features.images.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = features.images.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Numerical(format!("log-mel values have zero spread (mean {mean})")));
        }
        Ok(Normalization {
            mean,
            std,
            count: features.images.len() as u64,
            frontend: frontend.clone(),
        })
    }
}
