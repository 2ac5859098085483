//! The CNN6 feature extractor: parameter count and the 64x256 -> 512x4x16
//! shape law.

use multibreath::autodiff::{Graph, Tensor};
use multibreath::backbone::{forward_features, init_backbone, init_running_stats, BackboneConfig, StatsMode};

fn main() -> multibreath::Result<()> {
    let cfg = BackboneConfig::default();
    let params = init_backbone(&cfg, 0)?;
    println!("widths {:?}: {} parameters", cfg.widths, params.num_values());
    for (name, t) in params.iter() {
        println!("  {name:<28} {:?}", t.shape());
    }
    let stats = init_running_stats::<f32>(&cfg);
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1, 1, 64, 256], 0.1))?;
    let y = forward_features(&mut g, &params, &cfg, x, StatsMode::Eval(&stats))?;
    println!("input [1, 1, 64, 256] -> features {:?}", g.shape(y));
    println!("output_dims(64, 256) = {:?}", cfg.output_dims(64, 256)?);
    Ok(())
}
