use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mel::MelSpectrogram;
use crate::data::stream_rng;
use crate::error::{Error, Result};

/// Time/frequency masking. Widths are drawn uniformly from `0..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub time_masks: usize,
    pub max_time_frames: usize,
    pub freq_masks: usize,
    pub max_freq_bins: usize,
    pub fill_value: f32,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            time_masks: 1,
            max_time_frames: 20,
            freq_masks: 1,
            max_freq_bins: 40,
            fill_value: 0.0,
        }
    }
}

/// Half-open block `[band0, band1) x [frame0, frame1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRect {
    pub band0: usize,
    pub band1: usize,
    pub frame0: usize,
    pub frame1: usize,
}

impl MaskRect {
    pub fn contains(&self, band: usize, frame: usize) -> bool {
        (self.band0..self.band1).contains(&band) && (self.frame0..self.frame1).contains(&frame)
    }
}

/// Draws the rectangles for one image; frequency masks span all frames and
/// time masks span all bands.
pub fn draw_masks(spec: &MaskSpec, n_mels: usize, n_frames: usize, seed: u64) -> Result<Vec<MaskRect>> {
    if spec.max_time_frames > n_frames || spec.max_freq_bins > n_mels {
        return Err(Error::Validation(format!(
            "mask maxima ({} frames, {} bins) exceed the {n_mels}x{n_frames} image",
            spec.max_time_frames, spec.max_freq_bins
        )));
    }
    let mut rng = stream_rng(seed, 4);
    let mut rects = Vec::with_capacity(spec.freq_masks + spec.time_masks);
    for _ in 0..spec.freq_masks {
        let w = rng.gen_range(0..=spec.max_freq_bins);
        let b0 = rng.gen_range(0..=n_mels - w);
        rects.push(MaskRect {
            band0: b0,
            band1: b0 + w,
            frame0: 0,
            frame1: n_frames,
        });
    }
    for _ in 0..spec.time_masks {
        let w = rng.gen_range(0..=spec.max_time_frames);
        let f0 = rng.gen_range(0..=n_frames - w);
        rects.push(MaskRect {
            band0: 0,
            band1: n_mels,
            frame0: f0,
            frame1: f0 + w,
        });
    }
    Ok(rects)
}

/// Returns a masked copy and the rectangles that were filled.
pub fn apply_masks(s: &MelSpectrogram, spec: &MaskSpec, seed: u64) -> Result<(MelSpectrogram, Vec<MaskRect>)> {
    let (n_mels, n_frames) = (s.n_mels(), s.n_frames());
    let rects = draw_masks(spec, n_mels, n_frames, seed)?;
    let mut out = s.clone();
    fill_rects(out.values_mut(), n_frames, &rects, spec.fill_value);
    Ok((out, rects))
}

/// Fills `rects` in a row-major image with `n_frames` columns.
pub fn fill_rects(values: &mut [f32], n_frames: usize, rects: &[MaskRect], fill: f32) {
    for r in rects {
        for m in r.band0..r.band1 {
            values[m * n_frames + r.frame0..m * n_frames + r.frame1].fill(fill);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_respect_bounds() {
        let spec = MaskSpec::default();
        for seed in 0..200 {
            let rects = draw_masks(&spec, 64, 256, seed).unwrap();
            assert_eq!(rects.len(), 2);
            assert!(rects[0].band1 - rects[0].band0 <= 40 && rects[0].band1 <= 64);
            assert!(rects[1].frame1 - rects[1].frame0 <= 20 && rects[1].frame1 <= 256);
        }
        let too_wide = MaskSpec {
            max_freq_bins: 65,
            ..spec
        };
        assert!(draw_masks(&too_wide, 64, 256, 0).is_err());
    }
}
