//! Turns a synthetic wheeze cycle into the 64x256 log-mel image and shows
//! where its energy sits.
//!
//! cargo run --example mel_frontend -- [out.txt]

use multibreath::data::{synth_cycle, CycleClass};
use multibreath::dsp::{write_matrix, Frontend, FrontendConfig};

fn main() -> multibreath::Result<()> {
    let cycle = synth_cycle(CycleClass::Wheeze, 2.5, 4000, 3)?;
    let frontend = Frontend::new(FrontendConfig::default())?;
    let mel = frontend.process(&cycle.waveform)?;
    println!(
        "{} samples at {} Hz -> {} bands x {} frames",
        cycle.waveform.samples.len(),
        cycle.waveform.sample_rate_hz,
        mel.n_mels(),
        mel.n_frames()
    );

    let centers = frontend.transform().filterbank().band_centers_hz().to_vec();
    let mean_by_band: Vec<f64> = (0..mel.n_mels())
        .map(|b| (0..mel.n_frames()).map(|t| f64::from(mel.get(b, t))).sum::<f64>() / mel.n_frames() as f64)
        .collect();
    let mut ranked: Vec<usize> = (0..mel.n_mels()).collect();
    ranked.sort_by(|&a, &b| mean_by_band[b].total_cmp(&mean_by_band[a]));
    println!("strongest bands:");
    for &b in &ranked[..5] {
        println!("  band {b:>2} ({:>7.1} Hz)  mean log power {:.2}", centers[b], mean_by_band[b]);
    }

    if let Some(path) = std::env::args().nth(1) {
        write_matrix(std::path::Path::new(&path), mel.n_mels(), mel.n_frames(), mel.values())?;
        println!("wrote {path}");
    }
    Ok(())
}
