use std::f64::consts::PI;

use multibreath::data::{synth_cycle, CycleClass};
use multibreath::dsp::{
    apply_masks, build_mel_filterbank, circular_pad, resample, Frontend, FrontendConfig, MaskSpec, MelScale,
    MelTransform, StftConfig, Waveform,
};
use proptest::prelude::*;

fn sine(freq: f64, sr: u32, n: usize, amp: f64) -> Waveform {
    let s = (0..n)
        .map(|i| (amp * (2.0 * PI * freq * i as f64 / f64::from(sr)).sin()) as f32)
        .collect();
    Waveform::new(s, sr).unwrap()
}

/// O(N^2) DFT power at bin `k`.
fn dft_power(x: &[f64], k: usize) -> f64 {
    let n = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let a = -2.0 * PI * k as f64 * i as f64 / n;
        re += v * a.cos();
        im += v * a.sin();
    }
    re * re + im * im
}

fn default_transform() -> MelTransform {
    let fb = build_mel_filterbank(1024, 16_000, 64, 50.0, 2000.0, MelScale::Htk).unwrap();
    MelTransform::new(StftConfig::default(), fb).unwrap()
}

#[test]
fn resampled_440hz_peak_stays_at_440hz() {
    for from in [4000u32, 8000, 22_050, 44_100] {
        let w = sine(440.0, from, from as usize, 0.5);
        let r = resample(&w, 16_000).unwrap();
        assert!((r.samples.len() as i64 - 16_000).abs() <= 1);
        // 1 s of signal gives 1 Hz bins; scan 400..480 Hz
        let x: Vec<f64> = r.samples[..16_000].iter().map(|&v| f64::from(v)).collect();
        let peak = (400..480).max_by(|&a, &b| dft_power(&x, a).total_cmp(&dft_power(&x, b))).unwrap();
        assert!((peak as f64 - 440.0).abs() <= 2.0, "{from} Hz: peak at {peak}");
    }
}

#[test]
fn downsampling_removes_content_above_the_new_nyquist() {
    // 7 kHz at 44.1 kHz would alias to 1 kHz at 8 kHz without the low-pass
    let w = sine(7000.0, 44_100, 44_100, 0.5);
    let r = resample(&w, 8000).unwrap();
    let rms = (r.samples[800..7200].iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / 6400.0).sqrt();
    assert!(rms < 1e-3, "aliased rms {rms}");
}

#[test]
fn power_spectrogram_matches_naive_dft() {
    let t = default_transform();
    let w = sine(440.0, 16_000, 8192, 0.3);
    let p = t.power_spectrogram(&w.samples);
    let frames = t.n_frames(w.samples.len());
    assert_eq!(frames, 16);
    let hann: Vec<f64> = (0..1024).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / 1024.0).cos()).collect();
    // interior frame 5 starts at 5*512 - 512
    let start = 4 * 512;
    let frame: Vec<f64> = (0..1024).map(|i| f64::from(w.samples[start + i]) * hann[i]).collect();
    for k in [0usize, 10, 28, 29, 30, 100, 512] {
        let expected = dft_power(&frame, k);
        let got = f64::from(p[k * frames + 5]);
        assert!(
            (got - expected).abs() <= 1e-3 * expected.max(1e-2),
            "bin {k}: {got} vs {expected}"
        );
    }
}

#[test]
fn first_frame_uses_reflect_padding() {
    let t = default_transform();
    let w = sine(300.0, 16_000, 4096, 0.3);
    let p = t.power_spectrogram(&w.samples);
    let frames = t.n_frames(4096);
    let hann: Vec<f64> = (0..1024).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / 1024.0).cos()).collect();
    let frame: Vec<f64> = (0..1024)
        .map(|i| {
            let idx = i as i64 - 512;
            f64::from(w.samples[idx.unsigned_abs() as usize]) * hann[i]
        })
        .collect();
    for k in [0usize, 19, 40] {
        let expected = dft_power(&frame, k);
        let got = f64::from(p[k * frames]);
        assert!((got - expected).abs() <= 1e-3 * expected.max(1e-2), "bin {k}");
    }
}

#[test]
fn log_mel_matches_direct_projection() {
    let t = default_transform();
    let w = sine(700.0, 16_000, 4096, 0.2);
    let s = t.transform(&w.samples).unwrap();
    let p = t.power_spectrogram(&w.samples);
    let frames = s.n_frames();
    let fb = t.filterbank();
    for m in [0usize, 20, 40, 63] {
        for f in [0usize, 3, 7] {
            let mut acc = 0.0f64;
            for k in 0..fb.n_bins() {
                acc += f64::from(fb.weight(m, k)) * f64::from(p[k * frames + f]);
            }
            let expected = acc.max(1e-10).ln();
            assert!((f64::from(s.get(m, f)) - expected).abs() < 1e-4);
        }
    }
}

#[test]
fn one_khz_tone_lands_in_the_nearest_band() {
    let t = default_transform();
    let w = sine(1000.0, 16_000, 16_384, 0.5);
    let s = t.transform(&w.samples).unwrap();
    let centers = t.filterbank().band_centers_hz();
    let nearest = (0..64)
        .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
        .unwrap();
    for f in 2..s.n_frames() - 2 {
        let arg = (0..64).max_by(|&a, &b| s.get(a, f).total_cmp(&s.get(b, f))).unwrap();
        assert!((arg as i64 - nearest as i64).abs() <= 1, "frame {f}: band {arg}, expected {nearest}");
    }
}

#[test]
fn default_pipeline_gives_64_by_256() {
    let fe = Frontend::new(FrontendConfig::default()).unwrap();
    for (sr, n) in [(4000u32, 3000usize), (44_100, 300_000), (16_000, 131_072), (10_000, 5)] {
        let w = sine(200.0, sr, n, 0.1);
        let s = fe.process(&w).unwrap();
        assert_eq!((s.n_mels(), s.n_frames()), (64, 256));
        assert!(s.values().iter().all(|v| v.is_finite()));
    }
    assert!(fe.process(&Waveform::new(vec![], 4000).unwrap()).is_err());
}

#[test]
fn silence_hits_the_log_floor() {
    let fe = Frontend::new(FrontendConfig::default()).unwrap();
    let s = fe.process(&Waveform::new(vec![0.0; 1000], 16_000).unwrap()).unwrap();
    let floor = (1e-10f64).ln() as f32;
    assert!(s.values().iter().all(|&v| v == floor));
}

#[test]
fn gain_never_decreases_any_cell() {
    let fe = Frontend::new(FrontendConfig::default()).unwrap();
    let c = synth_cycle(CycleClass::Both, 1.3, 4000, 11).unwrap();
    let base = fe.process(&c.waveform).unwrap();
    for g in [1.5f32, 2.0, 4.0] {
        let louder = Waveform::new(c.waveform.samples.iter().map(|v| v * g).collect(), 4000).unwrap();
        let s = fe.process(&louder).unwrap();
        for (a, b) in base.values().iter().zip(s.values()) {
            assert!(b >= a, "gain {g}: {b} < {a}");
        }
    }
}

#[test]
fn padding_is_periodic() {
    let w = Waveform::new((0..1000).map(|i| i as f32 / 1000.0).collect(), 16_000).unwrap();
    let p = circular_pad(&w, 131_072).unwrap();
    for i in (0..131_072).step_by(997) {
        assert_eq!(p.samples[i], w.samples[i % 1000]);
    }
}

#[test]
fn wheeze_tone_raises_its_band() {
    let fe = Frontend::new(FrontendConfig::default()).unwrap();
    let normal = fe.process(&synth_cycle(CycleClass::Normal, 2.0, 4000, 5).unwrap().waveform).unwrap();
    let wheeze_cycle = synth_cycle(CycleClass::Wheeze, 2.0, 4000, 5).unwrap();
    let wheeze = fe.process(&wheeze_cycle.waveform).unwrap();
    let mean_band = |s: &multibreath::dsp::MelSpectrogram, m: usize| {
        (0..256).map(|f| f64::from(s.get(m, f))).sum::<f64>() / 256.0
    };
    let gains: Vec<f64> = (0..64).map(|m| mean_band(&wheeze, m) - mean_band(&normal, m)).collect();
    let best = (0..64).max_by(|&a, &b| gains[a].total_cmp(&gains[b])).unwrap();
    let centers = fe.transform().filterbank().band_centers_hz();
    let tone = multibreath::data::SynthRecipe::draw(CycleClass::Wheeze, 2.0, 4000, 5)
        .unwrap()
        .tone_hz
        .unwrap();
    assert!((centers[best] - tone).abs() < 60.0, "band {best} at {} vs tone {tone}", centers[best]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_touch_only_declared_rectangles(seed in any::<u64>(), fill in -5.0f32..5.0) {
        let fe = Frontend::new(FrontendConfig::default()).unwrap();
        let c = synth_cycle(CycleClass::Crackle, 0.5, 4000, seed % 7).unwrap();
        let s = fe.process(&c.waveform).unwrap();
        let spec = MaskSpec { fill_value: fill, ..MaskSpec::default() };
        let (masked, rects) = apply_masks(&s, &spec, seed).unwrap();
        prop_assert_eq!(rects.len(), 2);
        for m in 0..64 {
            for f in 0..256 {
                let inside = rects.iter().any(|r| r.contains(m, f));
                if inside {
                    prop_assert_eq!(masked.get(m, f), fill);
                } else {
                    prop_assert_eq!(masked.get(m, f), s.get(m, f));
                }
            }
        }
    }
}
