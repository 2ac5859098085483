//! Trains a tiny model for a few epochs on synthetic cycles, saves it,
//! reloads it and labels each cycle of one recording.

use multibreath::config::RunConfig;
use multibreath::pipeline;

fn main() -> multibreath::Result<()> {
    let dir = std::env::temp_dir().join("multibreath_checkpoint_example");
    let overrides: Vec<(String, String)> = [
        ("widths", "[8, 16]"),
        ("epochs", "15"),
        ("batch_size", "16"),
        ("learning_rate", "3e-3"),
        ("synth_train_per_class", "8"),
        ("synth_test_per_class", "2"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let cfg = RunConfig::resolve(None, &overrides)?;
    let work = dir.join("work");
    pipeline::synth(&cfg, &work)?;
    let outcome = pipeline::train(&work, &cfg, &dir.join("run"), |e| println!("epoch {} loss {:.4}", e.epoch, e.mean_loss))?;

    let recording = std::fs::read_dir(work.join("audio"))
        .map_err(|e| multibreath::Error::Validation(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "wav"))
        .min()
        .expect("synth wrote recordings");
    let annotations = recording.with_extension("txt");
    println!("{}", std::fs::read_to_string(&annotations).unwrap_or_default().trim_end());
    for c in pipeline::predict(&outcome.checkpoint, &recording, Some(&annotations))? {
        println!(
            "{:>6.3}-{:<6.3} {:<8} p = {:?}",
            c.start_s,
            c.end_s,
            c.prediction.class.name(),
            c.prediction.probabilities.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    Ok(())
}
