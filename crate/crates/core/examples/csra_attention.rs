//! Multi-head class-specific residual attention on a random feature map:
//! attention sharpness per temperature and the logits for H = 1, 2, 4, 6.

use multibreath::autodiff::{Graph, Tensor};
use multibreath::head::{attention_scores, csra_logits, flatten_positions, init_head, CsraHeadConfig, Temperature};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> multibreath::Result<()> {
    let (d, f, t) = (16, 4, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let features = Tensor::new(&[1, d, f, t], (0..d * f * t).map(|_| rng.gen_range(0.0f32..1.0)).collect())?;

    let cfg = CsraHeadConfig {
        feature_dim: d,
        ..CsraHeadConfig::default()
    };
    let params = init_head(&cfg, 1)?;
    println!("attention peak share for class 0 over {} positions:", f * t);
    for temp in [Temperature::Finite(1.0), Temperature::Finite(5.0), Temperature::Finite(1e3), Temperature::Infinite] {
        let mut g = Graph::<f32>::new();
        let x = g.constant(features.clone())?;
        let x = flatten_positions(&mut g, x)?;
        let c = g.constant(Tensor::new(&[2, d], params.get("head.classifier")?.data()[..2 * d].to_vec())?)?;
        let s = attention_scores(&mut g, x, c, temp)?;
        let row = &g.value(s).data()[..f * t];
        let peak = row.iter().cloned().fold(0.0f32, f32::max);
        println!("  T = {temp:?}: max score {peak:.4}, sum {:.6}", row.iter().sum::<f32>());
    }

    for heads in [1, 2, 4, 6] {
        let cfg = CsraHeadConfig {
            num_heads: heads,
            feature_dim: d,
            ..CsraHeadConfig::default()
        };
        let params = init_head(&cfg, 1)?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(features.clone())?;
        let z = csra_logits(&mut g, &params, &cfg, x)?;
        println!("H = {heads} temperatures {:?}: logits {:?}", cfg.resolved_temperatures()?, g.value(z).data());
    }
    Ok(())
}
