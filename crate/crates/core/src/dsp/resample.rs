use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel on each side, at the cutoff rate.
const ZERO_CROSSINGS: f64 = 16.0;
const KAISER_BETA: f64 = 8.6;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= half / k as f64;
        let t2 = term * term;
        sum += t2;
        if t2 < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(pos: f64, half_width: f64) -> f64 {
    let r = pos / half_width;
    if r.abs() > 1.0 {
        0.0
    } else {
        bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA)
    }
}

/// Rational `up/down` polyphase resampler with a Kaiser-windowed sinc
/// low-pass at `min(Nyquist_in, Nyquist_out)`.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    half_taps: usize,
    /// `up` phases of `2 * half_taps + 1` taps, each normalized to unit DC gain.
    phases: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(from_hz: u32, to_hz: u32) -> Result<Self> {
        if from_hz == 0 || to_hz == 0 {
            return Err(Error::Validation(format!(
                "sample rates must be positive, got {from_hz} -> {to_hz}"
            )));
        }
        let g = gcd(u64::from(from_hz), u64::from(to_hz));
        let up = (u64::from(to_hz) / g) as usize;
        let down = (u64::from(from_hz) / g) as usize;
        // cutoff in cycles per input sample, relative to input Nyquist
        let cutoff = (up as f64 / down as f64).min(1.0);
        let half_width = ZERO_CROSSINGS / cutoff;
        let half_taps = half_width.ceil() as usize;
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut taps: Vec<f64> = (0..=2 * half_taps)
                    .map(|j| {
                        let offset = j as f64 - half_taps as f64 - frac;
                        cutoff * sinc(cutoff * offset) * kaiser(offset, half_width)
                    })
                    .collect();
                let sum: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= sum);
                taps
            })
            .collect();
        Ok(Resampler {
            up,
            down,
            half_taps,
            phases,
        })
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        ((input_len as f64) * self.up as f64 / self.down as f64).round() as usize
    }

    pub fn process(&self, input: &[f32]) -> Vec<f32> {
        if self.up == 1 && self.down == 1 {
            return input.to_vec();
        }
        let n_out = self.output_len(input.len());
        let len = input.len() as isize;
        let h = self.half_taps as isize;
        (0..n_out)
            .map(|n| {
                let pos = n * self.down;
                let base = (pos / self.up) as isize;
                let taps = &self.phases[pos % self.up];
                let mut acc = 0.0;
                for (j, &t) in taps.iter().enumerate() {
                    let k = base + j as isize - h;
                    if k >= 0 && k < len {
                        acc += t * f64::from(input[k as usize]);
                    }
                }
                acc as f32
            })
            .collect()
    }
}

/// Band-limited conversion to `target_rate_hz`; equal rates return the
/// input unchanged.
pub fn resample(w: &Waveform, target_rate_hz: u32) -> Result<Waveform> {
    if w.samples.is_empty() {
        return Err(Error::Validation("cannot resample an empty waveform".into()));
    }
    if target_rate_hz == w.sample_rate_hz {
        return Ok(w.clone());
    }
    let r = Resampler::new(w.sample_rate_hz, target_rate_hz)?;
    Waveform::new(r.process(&w.samples), target_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsampling_length() {
        let w = Waveform::new(vec![0.1; 4000], 4000).unwrap();
        let out = resample(&w, 16_000).unwrap();
        assert_eq!(out.samples.len(), 16_000);
        assert_eq!(out.sample_rate_hz, 16_000);
    }

    #[test]
    fn identity_rate() {
        let w = Waveform::new(vec![0.1, -0.3, 0.7], 16_000).unwrap();
        assert_eq!(resample(&w, 16_000).unwrap(), w);
    }

    #[test]
    fn dc_is_preserved_in_the_interior() {
        for (from, to) in [(4000, 16_000), (44_100, 16_000), (22_050, 16_000)] {
            let w = Waveform::new(vec![0.5; from as usize], from).unwrap();
            let out = resample(&w, to).unwrap();
            let n = out.samples.len();
            for &v in &out.samples[n / 4..3 * n / 4] {
                assert!((v - 0.5).abs() < 1e-5, "{from}->{to}: {v}");
            }
        }
    }

    #[test]
    fn empty_input_and_bad_rate() {
        assert!(resample(&Waveform::new(vec![], 4000).unwrap(), 16_000).is_err());
        assert!(Resampler::new(0, 16_000).is_err());
    }

    #[test]
    fn duration_within_one_sample() {
        for (from, len) in [(44_100u32, 123_457usize), (4000, 9999), (48_000, 1), (10_000, 333)] {
            let r = Resampler::new(from, 16_000).unwrap();
            let exact = len as f64 * 16_000.0 / f64::from(from);
            assert!((r.output_len(len) as f64 - exact).abs() <= 1.0);
        }
    }
}
