use crate::error::{Error, Result};

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Validation(format!("sample {i} is not finite")));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }
}

/// Repeats the waveform end to end and truncates to `target_len` samples;
/// longer inputs keep their first `target_len` samples.
pub fn circular_pad(w: &Waveform, target_len: usize) -> Result<Waveform> {
    if w.samples.is_empty() {
        return Err(Error::Validation("cannot pad an empty waveform".into()));
    }
    if target_len == 0 {
        return Err(Error::Validation("padded length must be positive".into()));
    }
    let samples = w.samples.iter().cycle().take(target_len).copied().collect();
    Ok(Waveform {
        samples,
        sample_rate_hz: w.sample_rate_hz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_zero_rate() {
        assert!(Waveform::new(vec![0.0, f32::NAN], 4000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert_eq!(Waveform::new(vec![0.0; 8000], 4000).unwrap().duration_s(), 2.0);
    }

    #[test]
    fn circular_pad_wraps_and_truncates() {
        let w = Waveform::new(vec![1.0, 2.0, 3.0], 10).unwrap();
        assert_eq!(circular_pad(&w, 7).unwrap().samples, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0]);
        assert_eq!(circular_pad(&w, 2).unwrap().samples, vec![1.0, 2.0]);
        assert!(circular_pad(&Waveform::new(vec![], 10).unwrap(), 4).is_err());
    }
}
