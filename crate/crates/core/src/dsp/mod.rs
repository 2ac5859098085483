//! Audio front end: resampling, fixed-length padding and log-mel features.

mod mask;
mod matrix;
mod mel;
mod resample;
mod waveform;

pub use mask::{apply_masks, draw_masks, fill_rects, MaskRect, MaskSpec};
pub use matrix::{format_matrix, parse_matrix, read_matrix, write_matrix};
pub use mel::{
    build_mel_filterbank, mel_spectrogram, EdgePadding, MelFilterbank, MelScale, MelSpectrogram, MelTransform,
    StftConfig, WindowKind,
};
pub use resample::{resample, Resampler};
pub use waveform::{circular_pad, Waveform};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub padded_len: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub mel_scale: MelScale,
    pub stft: StftConfig,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate_hz: 16_000,
            padded_len: 131_072,
            n_mels: 64,
            fmin_hz: 50.0,
            fmax_hz: 2000.0,
            mel_scale: MelScale::Htk,
            stft: StftConfig::default(),
        }
    }
}

impl FrontendConfig {
    pub fn n_frames(&self) -> usize {
        self.padded_len.div_ceil(self.stft.hop)
    }
}

/// Cycle waveform to log-mel image: resample, circular pad, transform.
#[derive(Debug, Clone)]
pub struct Frontend {
    cfg: FrontendConfig,
    transform: MelTransform,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        let fb = build_mel_filterbank(
            cfg.stft.fft_size,
            cfg.sample_rate_hz,
            cfg.n_mels,
            cfg.fmin_hz,
            cfg.fmax_hz,
            cfg.mel_scale,
        )?;
        let transform = MelTransform::new(cfg.stft, fb)?;
        Ok(Frontend { cfg, transform })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn transform(&self) -> &MelTransform {
        &self.transform
    }

    pub fn process(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let resampled = resample(w, self.cfg.sample_rate_hz)?;
        let padded = circular_pad(&resampled, self.cfg.padded_len)?;
        mel_spectrogram(&padded, &self.transform, self.cfg.sample_rate_hz, self.cfg.padded_len)
    }
}
