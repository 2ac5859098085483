//! Synthetic respiratory cycles with known labels.
//!
//! * normal: band-limited noise
//! * wheeze: noise plus an amplitude-modulated tone in 200..800 Hz
//! * crackle: noise plus 5..20 exponentially damped clicks
//! * both: all of the above
//!
//! Every random draw comes from a ChaCha stream keyed by the seed, so a
//! `(kind, duration, rate, seed)` tuple always renders the same samples.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::annotation::CycleAnnotation;
use super::labels::{flags_from_class, CycleClass};
use super::recording::{write_wav, BreathCycle, RecordingMeta};
use crate::dsp::Waveform;
use crate::error::{Error, Result};

const NOISE_RMS: f64 = 0.05;
const TONE_AMPLITUDE: f64 = 0.12;
const CLICK_AMPLITUDE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Click {
    pub onset_s: f64,
    pub freq_hz: f64,
    pub decay_s: f64,
    pub amplitude: f64,
}

/// All random choices behind one synthetic cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecipe {
    pub kind: CycleClass,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub seed: u64,
    pub tone_hz: Option<f64>,
    pub tone_mod_hz: f64,
    pub clicks: Vec<Click>,
}

/// Independent generator for `(seed, stream)`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SynthRecipe {
    pub fn draw(kind: CycleClass, duration_s: f64, sample_rate_hz: u32, seed: u64) -> Result<Self> {
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(Error::Validation(format!(
                "synthetic cycle duration {duration_s} must be positive"
            )));
        }
        if sample_rate_hz == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        let (crackle, wheeze) = flags_from_class(kind);
        // separate streams keep the tone identical between `wheeze` and `both`
        let mut tone_rng = stream_rng(seed, 1);
        let top = 800f64.min(0.45 * f64::from(sample_rate_hz));
        let tone_hz = wheeze.then(|| tone_rng.gen_range(200.0..top.max(201.0)));
        let tone_mod_hz = tone_rng.gen_range(1.0..4.0);
        let mut click_rng = stream_rng(seed, 2);
        let clicks = if crackle {
            let n = click_rng.gen_range(5..=20);
            let click_top = 1200f64.min(0.45 * f64::from(sample_rate_hz));
            (0..n)
                .map(|_| Click {
                    onset_s: click_rng.gen_range(0.0..duration_s),
                    freq_hz: click_rng.gen_range(300.0..click_top.max(301.0)),
                    decay_s: click_rng.gen_range(0.002..0.006),
                    amplitude: CLICK_AMPLITUDE * click_rng.gen_range(0.6..1.0),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(SynthRecipe {
            kind,
            duration_s,
            sample_rate_hz,
            seed,
            tone_hz,
            tone_mod_hz,
            clicks,
        })
    }

    pub fn render(&self) -> Result<Waveform> {
        let sr = f64::from(self.sample_rate_hz);
        let n = ((self.duration_s * sr).round() as usize).max(1);
        let mut samples = band_limited_noise(n, sr, &mut stream_rng(self.seed, 0));
        if let Some(f) = self.tone_hz {
            for (i, s) in samples.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let envelope = 0.75 + 0.25 * (2.0 * PI * self.tone_mod_hz * t).sin();
                *s += TONE_AMPLITUDE * envelope * (2.0 * PI * f * t).sin();
            }
        }
        for c in &self.clicks {
            let start = (c.onset_s * sr).round() as usize;
            let span = ((8.0 * c.decay_s) * sr).ceil() as usize;
            for i in start..(start + span).min(n) {
                let t = (i - start) as f64 / sr;
                samples[i] += c.amplitude * (-t / c.decay_s).exp() * (2.0 * PI * c.freq_hz * t).sin();
            }
        }
        Waveform::new(samples.into_iter().map(|v| v as f32).collect(), self.sample_rate_hz)
    }
}

/// White Gaussian noise through a 100..1000 Hz band-pass biquad, scaled to
/// a fixed RMS.
fn band_limited_noise(n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let center = 300f64.min(0.2 * sr);
    let q = 0.4;
    let w0 = 2.0 * PI * center / sr;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x;
            y2 = y1;
            y1 = y;
            y
        })
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v *= NOISE_RMS / rms);
    }
    out
}

/// Placeholder provenance for stand-alone synthetic cycles.
pub fn synthetic_meta(patient_id: u32, recording: usize) -> RecordingMeta {
    RecordingMeta {
        patient_id,
        recording_index: format!("{}b1", recording + 1),
        chest_location: "Tc".into(),
        acquisition_mode: "sc".into(),
        device: "Synth".into(),
    }
}

pub fn synth_cycle(kind: CycleClass, duration_s: f64, sample_rate_hz: u32, seed: u64) -> Result<BreathCycle> {
    let recipe = SynthRecipe::draw(kind, duration_s, sample_rate_hz, seed)?;
    let waveform = recipe.render()?;
    let (crackle, wheeze) = flags_from_class(kind);
    let end_s = waveform.duration_s();
    Ok(BreathCycle {
        meta: synthetic_meta(1, 0),
        annotation: CycleAnnotation::new(0.0, end_s, crackle, wheeze)?,
        waveform,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatasetConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sample_rate_hz: u32,
    pub min_cycle_ms: u32,
    pub max_cycle_ms: u32,
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        SynthDatasetConfig {
            train_per_class: 100,
            test_per_class: 50,
            sample_rate_hz: 4000,
            min_cycle_ms: 1500,
            max_cycle_ms: 3500,
            seed: 7,
        }
    }
}

/// Output of [`write_synth_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub audio_dir: PathBuf,
    pub split_file: PathBuf,
    pub recordings: usize,
}

pub const SYNTH_AUDIO_DIR: &str = "audio";
pub const SPLIT_FILE: &str = "split.txt";

/// Writes an ICBHI-layout dataset: one recording (and one patient) per
/// group of four cycles, one cycle of each class in shuffled order, plus a
/// split file assigning recordings to train or test.
pub fn write_synth_dataset(out: &Path, cfg: &SynthDatasetConfig) -> Result<SynthDataset> {
    if cfg.train_per_class == 0 || cfg.min_cycle_ms == 0 || cfg.max_cycle_ms < cfg.min_cycle_ms {
        return Err(Error::Validation(format!("invalid synthetic dataset config {cfg:?}")));
    }
    let audio_dir = out.join(SYNTH_AUDIO_DIR);
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut split_lines = String::new();
    let total = cfg.train_per_class + cfg.test_per_class;
    let mut layout_rng = stream_rng(cfg.seed, 3);
    for r in 0..total {
        let split = if r < cfg.train_per_class { "train" } else { "test" };
        let meta = synthetic_meta(1000 + r as u32, 0);
        let mut order = CycleClass::ALL;
        order.shuffle(&mut layout_rng);
        let mut samples = Vec::new();
        let mut annotations = Vec::new();
        for (k, kind) in order.into_iter().enumerate() {
            let ms = layout_rng.gen_range(cfg.min_cycle_ms..=cfg.max_cycle_ms);
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add((r * 4 + k) as u64);
            let wave = SynthRecipe::draw(kind, f64::from(ms) / 1000.0, cfg.sample_rate_hz, seed)?.render()?;
            let start_s = samples.len() as f64 / f64::from(cfg.sample_rate_hz);
            samples.extend_from_slice(&wave.samples);
            let end_s = samples.len() as f64 / f64::from(cfg.sample_rate_hz);
            let (crackle, wheeze) = flags_from_class(kind);
            annotations.push(CycleAnnotation::new(start_s, end_s, crackle, wheeze)?);
        }
        let stem = meta.file_stem();
        write_wav(&audio_dir.join(format!("{stem}.wav")), &Waveform::new(samples, cfg.sample_rate_hz)?)?;
        let text: String = annotations.iter().map(|a| a.to_line() + "\n").collect();
        let txt = audio_dir.join(format!("{stem}.txt"));
        fs::write(&txt, text).map_err(|e| Error::io(&txt, e))?;
        split_lines.push_str(&format!("{stem}\t{split}\n"));
    }
    let split_file = out.join(SPLIT_FILE);
    fs::write(&split_file, split_lines).map_err(|e| Error::io(&split_file, e))?;
    Ok(SynthDataset {
        audio_dir,
        split_file,
        recordings: total,
    })
}
