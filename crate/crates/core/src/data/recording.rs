use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotation::CycleAnnotation;
use super::labels::LabelVector;
use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Provenance fields encoded in an ICBHI file stem
/// `<patient>_<index>_<location>_<mode>_<device>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub patient_id: u32,
    pub recording_index: String,
    pub chest_location: String,
    pub acquisition_mode: String,
    pub device: String,
}

impl RecordingMeta {
    pub fn file_stem(&self) -> String {
        format!(
            "{}_{}_{}_{}_{}",
            self.patient_id,
            self.recording_index,
            self.chest_location,
            self.acquisition_mode,
            self.device
        )
    }
}

impl fmt::Display for RecordingMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.file_stem())
    }
}

pub fn parse_recording_filename(file_stem: &str) -> Result<RecordingMeta> {
    let err = |message: String| Error::Parse { line: 0, message };
    let tokens: Vec<&str> = file_stem.split('_').collect();
    if tokens.len() != 5 || tokens.iter().any(|t| t.is_empty()) {
        return Err(err(format!(
            "recording name {file_stem:?} must have 5 underscore-separated tokens"
        )));
    }
    let patient_id: u32 = tokens[0]
        .parse()
        .map_err(|_| err(format!("recording name {file_stem:?}: patient id is not a number")))?;
    if patient_id == 0 {
        return Err(err(format!("recording name {file_stem:?}: patient id must be positive")));
    }
    Ok(RecordingMeta {
        patient_id,
        recording_index: tokens[1].to_string(),
        chest_location: tokens[2].to_string(),
        acquisition_mode: tokens[3].to_string(),
        device: tokens[4].to_string(),
    })
}

/// One labeled respiratory cycle cut from a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct BreathCycle {
    pub meta: RecordingMeta,
    pub annotation: CycleAnnotation,
    pub waveform: Waveform,
}

impl BreathCycle {
    pub fn labels(&self) -> LabelVector {
        self.annotation.labels()
    }
}

/// Annotations may overrun the audio by this much before being rejected.
pub const END_TOLERANCE_S: f64 = 0.01;

/// Cuts `[round(start*sr), round(end*sr))` for every annotation.
///
/// Ends past the audio by at most [`END_TOLERANCE_S`] are clamped.
pub fn extract_cycles(
    waveform: &Waveform,
    annotations: &[CycleAnnotation],
    meta: &RecordingMeta,
) -> Result<Vec<BreathCycle>> {
    let sr = f64::from(waveform.sample_rate_hz);
    let duration = waveform.duration_s();
    let len = waveform.samples.len();
    annotations
        .iter()
        .map(|a| {
            if a.end_s > duration + END_TOLERANCE_S {
                return Err(Error::Range(format!(
                    "{}: cycle [{}, {}) ends past the recording ({duration:.3} s)",
                    meta, a.start_s, a.end_s
                )));
            }
            let start = ((a.start_s * sr).round() as usize).min(len);
            let end = ((a.end_s * sr).round() as usize).min(len);
            if end <= start {
                return Err(Error::Range(format!(
                    "{}: cycle [{}, {}) is empty at {} Hz",
                    meta, a.start_s, a.end_s, waveform.sample_rate_hz
                )));
            }
            Ok(BreathCycle {
                meta: meta.clone(),
                annotation: *a,
                waveform: Waveform::new(waveform.samples[start..end].to_vec(), waveform.sample_rate_hz)?,
            })
        })
        .collect()
}

/// Reads the first channel of a PCM (8/16/24/32-bit integer) or 32-bit
/// float WAV file, scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .step_by(channels)
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .step_by(channels)
                .map(|s| s.map(|v| (f64::from(v) * scale) as f32))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes a mono 32-bit float WAV file.
pub fn write_wav(path: &Path, waveform: &Waveform) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: waveform.sample_rate_hz,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &waveform.samples {
        writer.write_sample(s).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> RecordingMeta {
        parse_recording_filename("101_1b1_Al_sc_Meditron").unwrap()
    }

    #[test]
    fn icbhi_stems() {
        let m = meta();
        assert_eq!(m.patient_id, 101);
        assert_eq!(m.recording_index, "1b1");
        assert_eq!(m.chest_location, "Al");
        assert_eq!(m.acquisition_mode, "sc");
        assert_eq!(m.device, "Meditron");
        assert_eq!(m.file_stem(), "101_1b1_Al_sc_Meditron");
        let m = parse_recording_filename("226_1b1_Pl_sc_LittC2SE").unwrap();
        assert_eq!(m.patient_id, 226);
        assert_eq!(m.chest_location, "Pl");
        assert_eq!(m.device, "LittC2SE");
    }

    #[test]
    fn bad_stems() {
        assert!(parse_recording_filename("abc_1_2").is_err());
        assert!(parse_recording_filename("abc_1b1_Al_sc_Meditron").is_err());
        assert!(parse_recording_filename("0_1b1_Al_sc_Meditron").is_err());
        assert!(parse_recording_filename("101__Al_sc_Meditron").is_err());
    }

    #[test]
    fn cycle_lengths_follow_rounding() {
        let w = Waveform::new(vec![0.0; 40_000], 4000).unwrap();
        let a = CycleAnnotation::new(2.0, 4.0, false, true).unwrap();
        let cycles = extract_cycles(&w, &[a], &meta()).unwrap();
        assert_eq!(cycles[0].waveform.samples.len(), 8000);
        assert_eq!(cycles[0].annotation, a);
    }

    #[test]
    fn full_span_is_identity_and_overrun_is_rejected() {
        let samples: Vec<f32> = (0..1000).map(|i| i as f32).collect();
        let w = Waveform::new(samples.clone(), 100).unwrap();
        let all = CycleAnnotation::new(0.0, 10.0, false, false).unwrap();
        let c = extract_cycles(&w, &[all], &meta()).unwrap();
        assert_eq!(c[0].waveform.samples, samples);

        let slop = CycleAnnotation::new(9.0, 10.008, false, false).unwrap();
        assert_eq!(extract_cycles(&w, &[slop], &meta()).unwrap()[0].waveform.samples.len(), 100);

        let past = CycleAnnotation::new(9.5, 12.0, false, false).unwrap();
        assert!(matches!(extract_cycles(&w, &[past], &meta()), Err(Error::Range(_))));
    }

    #[test]
    fn wav_round_trip_and_integer_formats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.25, 0.125], 4000).unwrap();
        write_wav(&path, &w).unwrap();
        assert_eq!(read_wav(&path).unwrap(), w);

        let pcm = dir.path().join("b.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&pcm, spec).unwrap();
        for (l, r) in [(16384i16, 1i16), (-32768, 2), (0, 3)] {
            writer.write_sample(l).unwrap();
            writer.write_sample(r).unwrap();
        }
        writer.finalize().unwrap();
        let read = read_wav(&pcm).unwrap();
        assert_eq!(read.sample_rate_hz, 44_100);
        assert_eq!(read.samples, vec![0.5, -1.0, 0.0]);

        let pcm24 = dir.path().join("c.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 4000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&pcm24, spec).unwrap();
        writer.write_sample(1 << 22).unwrap();
        writer.finalize().unwrap();
        assert_eq!(read_wav(&pcm24).unwrap().samples, vec![0.5]);
    }
}
