//! Draws time and frequency masks for a log-mel image and counts what they
//! blank out.

use multibreath::data::{synth_cycle, CycleClass};
use multibreath::dsp::{apply_masks, Frontend, FrontendConfig, MaskSpec};

fn main() -> multibreath::Result<()> {
    let cycle = synth_cycle(CycleClass::Crackle, 2.0, 4000, 1)?;
    let mel = Frontend::new(FrontendConfig::default())?.process(&cycle.waveform)?;
    let spec = MaskSpec::default();
    for seed in 0..4 {
        let (masked, rects) = apply_masks(&mel, &spec, seed)?;
        let changed = masked.values().iter().zip(mel.values()).filter(|(a, b)| a != b).count();
        println!("seed {seed}: {changed:>5} cells masked");
        for r in rects {
            println!("  bands {:>2}..{:<2} frames {:>3}..{:<3}", r.band0, r.band1, r.frame0, r.frame1);
        }
    }
    Ok(())
}
