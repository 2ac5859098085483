//! Builds the manifest, split summary and normalization constants for an
//! ICBHI-layout directory.
//!
//! cargo run --release --example prepare_dataset -- <data_dir> <out_dir> [official|0.6|0.8]

use std::path::Path;
use std::time::Instant;

use multibreath::config::RunConfig;
use multibreath::pipeline;

fn main() -> multibreath::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 3 {
        eprintln!("usage: prepare_dataset <data_dir> <out_dir> [official|ratio]");
        std::process::exit(1);
    }
    let split = args.get(3).cloned().unwrap_or_else(|| "official".into());
    let cfg = RunConfig::resolve(None, &[("split".into(), split)])?;
    let started = Instant::now();
    let prepared = pipeline::prepare(Path::new(&args[1]), &cfg, Path::new(&args[2]))?;
    println!("{}", serde_json::to_string_pretty(&prepared.manifest.summary)?);
    println!(
        "log-mel mean {:.4} std {:.4} over {} values, {:.1}s",
        prepared.normalization.mean,
        prepared.normalization.std,
        prepared.normalization.count,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
