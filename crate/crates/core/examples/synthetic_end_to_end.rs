//! Synthesizes a labeled dataset, trains the default model on it and
//! reports test metrics.
//!
//! cargo run --release --example synthetic_end_to_end -- [epochs] [out_dir]

use std::path::PathBuf;

use multibreath::config::RunConfig;
use multibreath::data::Split;
use multibreath::pipeline;

fn main() -> multibreath::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).map_or("10".to_string(), Clone::clone);
    let out = args.get(2).map_or_else(|| std::env::temp_dir().join("multibreath_synth"), PathBuf::from);
    let cfg = RunConfig::resolve(None, &[("epochs".into(), epochs)])?;

    let data = out.join("data");
    let prepared = pipeline::synth(&cfg, &data)?;
    println!("{}", serde_json::to_string(&prepared.manifest.summary)?);

    let run = out.join("run");
    let outcome = pipeline::train(&data, &cfg, &run, |e| {
        println!("epoch {:>2}  loss {:.5}  lr {:.2e}..{:.2e}  {:.1}s", e.epoch, e.mean_loss, e.lr_start, e.lr_end, e.wall_seconds)
    })?;

    let eval = pipeline::evaluate(&outcome.checkpoint, &data, Split::Test, 1, Some(&run.join("confusion.ppm")))?;
    print!("{}", eval.report.to_document());
    Ok(())
}
