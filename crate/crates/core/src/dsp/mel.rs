//! Mel filterbank and log-mel spectrogram.

use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelScale {
    /// `2595 * log10(1 + f / 700)`.
    Htk,
    /// Linear below 1 kHz, logarithmic above.
    Slaney,
}

impl MelScale {
    pub fn hz_to_mel(self, hz: f64) -> f64 {
        match self {
            MelScale::Htk => 2595.0 * (1.0 + hz / 700.0).log10(),
            MelScale::Slaney => {
                let f_sp = 200.0 / 3.0;
                let min_log_hz = 1000.0;
                let min_log_mel = min_log_hz / f_sp;
                let logstep = (6.4f64).ln() / 27.0;
                if hz >= min_log_hz {
                    min_log_mel + (hz / min_log_hz).ln() / logstep
                } else {
                    hz / f_sp
                }
            }
        }
    }

    pub fn mel_to_hz(self, mel: f64) -> f64 {
        match self {
            MelScale::Htk => 700.0 * (10f64.powf(mel / 2595.0) - 1.0),
            MelScale::Slaney => {
                let f_sp = 200.0 / 3.0;
                let min_log_hz = 1000.0;
                let min_log_mel = min_log_hz / f_sp;
                let logstep = (6.4f64).ln() / 27.0;
                if mel >= min_log_mel {
                    min_log_hz * (logstep * (mel - min_log_mel)).exp()
                } else {
                    f_sp * mel
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Hamming,
}

impl WindowKind {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f32> {
        let (a0, a1) = match self {
            WindowKind::Hann => (0.5, 0.5),
            WindowKind::Hamming => (0.54, 0.46),
        };
        (0..n)
            .map(|i| (a0 - a1 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgePadding {
    /// Mirror without repeating the edge sample.
    Reflect,
    Zero,
}

/// Triangular mel bands over the `1 + fft_size/2` FFT bins.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    /// Row-major `[n_mels, n_bins]`.
    weights: Vec<f32>,
    band_centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn band_centers_hz(&self) -> &[f64] {
        &self.band_centers_hz
    }

    pub fn band(&self, m: usize) -> &[f32] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn weight(&self, band: usize, bin: usize) -> f32 {
        self.weights[band * self.n_bins + bin]
    }
}

/// Builds `n_mels` triangles whose edges are equally spaced on the mel scale
/// between `fmin` and `fmax`; each band is rescaled so its largest bin
/// weight is exactly 1.
pub fn build_mel_filterbank(
    fft_size: usize,
    sample_rate: u32,
    n_mels: usize,
    fmin: f64,
    fmax: f64,
    scale: MelScale,
) -> Result<MelFilterbank> {
    let nyquist = f64::from(sample_rate) / 2.0;
    if fft_size < 2 || n_mels == 0 || !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(Error::Validation(format!(
            "mel filterbank needs fft_size >= 2, n_mels > 0 and 0 <= fmin < fmax <= {nyquist}; \
             got fft_size={fft_size}, n_mels={n_mels}, fmin={fmin}, fmax={fmax}"
        )));
    }
    let n_bins = fft_size / 2 + 1;
    let bin_hz = f64::from(sample_rate) / fft_size as f64;
    let (lo, hi) = (scale.hz_to_mel(fmin), scale.hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| scale.mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = vec![0f32; n_mels * n_bins];
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            *w = rising.min(falling).max(0.0) as f32;
        }
        let peak = row.iter().cloned().fold(0f32, f32::max);
        if peak <= 0.0 {
            return Err(Error::Validation(format!(
                "mel band {m} ({left:.1}..{right:.1} Hz) contains no FFT bin; \
                 use fewer bands or a larger FFT"
            )));
        }
        row.iter_mut().for_each(|w| *w /= peak);
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        weights,
        band_centers_hz: edges[1..=n_mels].to_vec(),
    })
}

/// Log-power mel image, row-major `[n_mels, n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    n_mels: usize,
    n_frames: usize,
    values: Vec<f32>,
    pub source: Option<String>,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, n_frames: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_mels * n_frames {
            return Err(Error::Shape(format!(
                "{} values for a {n_mels}x{n_frames} spectrogram",
                values.len()
            )));
        }
        Ok(MelSpectrogram {
            n_mels,
            n_frames,
            values,
            source: None,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.n_frames + frame]
    }

    pub fn frame(&self, frame: usize) -> impl Iterator<Item = f32> + '_ {
        (0..self.n_mels).map(move |m| self.get(m, frame))
    }
}

/// Centered STFT settings plus the mel projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub padding: EdgePadding,
    pub log_floor: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 1024,
            hop: 512,
            window: WindowKind::Hann,
            padding: EdgePadding::Reflect,
            log_floor: 1e-10,
        }
    }
}

/// Reusable log-mel transform; immutable and shareable across threads.
#[derive(Clone)]
pub struct MelTransform {
    cfg: StftConfig,
    filterbank: MelFilterbank,
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for MelTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelTransform")
            .field("cfg", &self.cfg)
            .field("n_mels", &self.filterbank.n_mels)
            .finish()
    }
}

impl MelTransform {
    pub fn new(cfg: StftConfig, filterbank: MelFilterbank) -> Result<Self> {
        if filterbank.n_bins != cfg.fft_size / 2 + 1 || cfg.hop == 0 || !(cfg.log_floor > 0.0) {
            return Err(Error::Validation(format!(
                "stft {cfg:?} does not fit a filterbank over {} bins",
                filterbank.n_bins
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(MelTransform {
            window: cfg.window.coefficients(cfg.fft_size),
            cfg,
            filterbank,
            fft,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Frames are centered at `0, hop, 2*hop, ...` strictly inside the
    /// signal, so `len / hop` frames for lengths divisible by `hop`.
    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.cfg.hop)
    }

    fn sample_at(&self, x: &[f32], idx: isize) -> f32 {
        let n = x.len() as isize;
        if (0..n).contains(&idx) {
            return x[idx as usize];
        }
        match self.cfg.padding {
            EdgePadding::Zero => 0.0,
            EdgePadding::Reflect => {
                if n == 1 {
                    return x[0];
                }
                let period = 2 * (n - 1);
                let mut i = idx.rem_euclid(period);
                if i >= n {
                    i = period - i;
                }
                x[i as usize]
            }
        }
    }

    /// Power spectrogram `|X|^2`, row-major `[n_bins, n_frames]`.
    pub fn power_spectrogram(&self, samples: &[f32]) -> Vec<f32> {
        let n_fft = self.cfg.fft_size;
        let n_bins = n_fft / 2 + 1;
        let frames = self.n_frames(samples.len());
        let half = (n_fft / 2) as isize;
        let mut out = vec![0f32; n_bins * frames];
        let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex32::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = (t * self.cfg.hop) as isize - half;
            let interior = start >= 0 && start as usize + n_fft <= samples.len();
            for (i, b) in buf.iter_mut().enumerate() {
                let v = if interior {
                    samples[start as usize + i]
                } else {
                    self.sample_at(samples, start + i as isize)
                };
                *b = Complex32::new(v * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_bins {
                out[k * frames + t] = buf[k].norm_sqr();
            }
        }
        out
    }

    /// Log-mel image of `samples`; the caller is responsible for length.
    pub fn transform(&self, samples: &[f32]) -> Result<MelSpectrogram> {
        if samples.is_empty() {
            return Err(Error::Validation("empty waveform".into()));
        }
        let frames = self.n_frames(samples.len());
        let n_bins = self.filterbank.n_bins;
        let power = self.power_spectrogram(samples);
        let floor = self.cfg.log_floor;
        let mut values = vec![0f32; self.filterbank.n_mels * frames];
        for m in 0..self.filterbank.n_mels {
            let band = self.filterbank.band(m);
            for t in 0..frames {
                let mut acc = 0f64;
                for (k, &w) in band.iter().enumerate() {
                    if w != 0.0 {
                        acc += f64::from(w) * f64::from(power[k * frames + t]);
                    }
                }
                values[m * frames + t] = acc.max(floor).ln() as f32;
            }
        }
        debug_assert_eq!(power.len(), n_bins * frames);
        MelSpectrogram::new(self.filterbank.n_mels, frames, values)
    }
}

/// Fixed-geometry log-mel spectrogram: the waveform must already be at the
/// expected rate and length.
pub fn mel_spectrogram(
    w: &Waveform,
    transform: &MelTransform,
    expected_rate_hz: u32,
    expected_len: usize,
) -> Result<MelSpectrogram> {
    if w.sample_rate_hz != expected_rate_hz || w.samples.len() != expected_len {
        return Err(Error::Validation(format!(
            "mel spectrogram expects {expected_len} samples at {expected_rate_hz} Hz, got {} at {} Hz \
             (resample and pad first)",
            w.samples.len(),
            w.sample_rate_hz
        )));
    }
    transform.transform(&w.samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_fb() -> MelFilterbank {
        build_mel_filterbank(1024, 16_000, 64, 50.0, 2000.0, MelScale::Htk).unwrap()
    }

    #[test]
    fn band_centers_are_interior_and_increasing() {
        let fb = default_fb();
        let c = fb.band_centers_hz();
        assert_eq!(c.len(), 64);
        assert!(c[0] > 50.0 && c[63] < 2000.0);
        assert!(c.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn weights_outside_the_band_are_zero() {
        let fb = default_fb();
        let bin_hz = 16_000.0 / 1024.0;
        for k in 0..fb.n_bins() {
            let f = k as f64 * bin_hz;
            let total: f32 = (0..64).map(|m| fb.weight(m, k)).sum();
            if f <= 50.0 || f >= 2000.0 {
                assert_eq!(total, 0.0, "bin {k} at {f} Hz");
            } else {
                assert!(total > 0.0, "bin {k} at {f} Hz has no weight");
            }
        }
    }

    #[test]
    fn bands_are_unimodal_with_unit_peak() {
        let fb = default_fb();
        for m in 0..64 {
            let band = fb.band(m);
            assert!(band.iter().all(|&w| w >= 0.0));
            assert_eq!(band.iter().cloned().fold(0f32, f32::max), 1.0);
            let nz: Vec<usize> = (0..band.len()).filter(|&k| band[k] > 0.0).collect();
            assert_eq!(nz.len(), nz[nz.len() - 1] - nz[0] + 1, "band {m} not contiguous");
            let mut direction_changes = 0;
            let mut rising = true;
            for k in nz[0]..nz[nz.len() - 1] {
                let up = band[k + 1] > band[k];
                if rising && !up && band[k + 1] < band[k] {
                    rising = false;
                    direction_changes += 1;
                } else if !rising && up {
                    direction_changes += 1;
                }
            }
            assert!(direction_changes <= 1, "band {m}");
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(build_mel_filterbank(1024, 16_000, 64, 2000.0, 50.0, MelScale::Htk).is_err());
        assert!(build_mel_filterbank(1024, 16_000, 64, 50.0, 9000.0, MelScale::Htk).is_err());
        assert!(build_mel_filterbank(1024, 16_000, 0, 50.0, 2000.0, MelScale::Htk).is_err());
    }

    #[test]
    fn mel_scales_invert() {
        for scale in [MelScale::Htk, MelScale::Slaney] {
            for f in [0.0, 50.0, 700.0, 1000.0, 2000.0, 7999.0] {
                assert!((scale.mel_to_hz(scale.hz_to_mel(f)) - f).abs() < 1e-6);
            }
        }
        assert!((MelScale::Htk.hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let t = MelTransform::new(StftConfig::default(), default_fb()).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        let got: Vec<f32> = (-3..7).map(|i| t.sample_at(&x, i)).collect();
        assert_eq!(got, vec![4.0, 3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0]);
    }
}
