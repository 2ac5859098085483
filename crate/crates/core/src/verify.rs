//! The finite-difference gradient suite behind `multibreath gradcheck`:
//! every graph primitive, a tiny backbone and the attention head for each
//! supported head count, each over a range of seeds in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, BatchNormMode, BatchNormStats, Graph, ParameterSet, Tensor, Var};
use crate::backbone::{forward_features, init_backbone, init_running_stats, BackboneConfig, StatsMode};
use crate::error::Result;
use crate::head::{csra_logits, init_head, CsraHeadConfig};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub name: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Stencils shrunk because they straddled a relu or argmax kink.
    pub refinements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<SuiteCase>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn lines(&self) -> Vec<String> {
        self.cases
            .iter()
            .map(|c| {
                let status = if c.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
                format!(
                    "{status:4} {:<26} seeds={} max_rel_err={:.3e} refinements={} (worst: seed {}, {} analytic {:.6e} numeric {:.6e})",
                    c.name,
                    c.seeds,
                    c.max_rel_error,
                    c.refinements,
                    c.worst_seed,
                    c.worst_param,
                    c.worst_analytic,
                    c.worst_numeric
                )
            })
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Magnitudes in `[0.1, 1.5)`, so kinks at zero are not straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.5);
            if positive || rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// `sum(y * r)` for a fixed random `r`.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_CAFE);
    let shape = g.shape(y).to_vec();
    let r = g.constant(uniform(&mut rng, &shape, -1.0, 1.0))?;
    let prod = g.mul(y, r)?;
    g.sum_all(prod)
}

type Build = Box<dyn Fn(&mut Graph<f64>, &ParameterSet<f64>) -> Result<Var>>;

struct Case {
    name: &'static str,
    step: f64,
    setup: fn(u64) -> Result<(ParameterSet<f64>, Build)>,
}

fn single(x: Tensor<f64>) -> Result<ParameterSet<f64>> {
    let mut p = ParameterSet::new();
    p.insert("x", x)?;
    Ok(p)
}

fn unary(seed: u64, positive: bool, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<(ParameterSet<f64>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape: Vec<usize> = (0..3).map(|_| rng.gen_range(1..5)).collect();
    let p = single(away_from_zero(&mut rng, &shape, positive))?;
    Ok((
        p,
        Box::new(move |g, p| {
            let x = g.param(p, "x")?;
            let y = op(g, x)?;
            project(g, y, seed)
        }),
    ))
}

fn binary(seed: u64, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Result<(ParameterSet<f64>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape: Vec<usize> = (0..3).map(|_| rng.gen_range(1..5)).collect();
    let mut p = ParameterSet::new();
    p.insert("a", uniform(&mut rng, &shape, -1.0, 1.0))?;
    p.insert("b", uniform(&mut rng, &shape, -1.0, 1.0))?;
    Ok((
        p,
        Box::new(move |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let y = op(g, a, b)?;
            project(g, y, seed)
        }),
    ))
}

fn axis_op(seed: u64, op: fn(&mut Graph<f64>, Var, usize) -> Result<Var>) -> Result<(ParameterSet<f64>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape: Vec<usize> = (0..3).map(|_| rng.gen_range(1..5)).collect();
    let axis = rng.gen_range(0..3);
    let p = single(uniform(&mut rng, &shape, -2.0, 2.0))?;
    Ok((
        p,
        Box::new(move |g, p| {
            let x = g.param(p, "x")?;
            let y = op(g, x, axis)?;
            project(g, y, seed)
        }),
    ))
}

fn matmul_case(seed: u64, batched: bool) -> Result<(ParameterSet<f64>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let (sa, sb) = if batched {
        (vec![b, m, k], vec![b, k, n])
    } else {
        (vec![m, k], vec![k, n])
    };
    let mut p = ParameterSet::new();
    p.insert("a", uniform(&mut rng, &sa, -1.0, 1.0))?;
    // stored transposed, so transpose is exercised too
    let mut sbt = sb.clone();
    let r = sbt.len();
    sbt.swap(r - 1, r - 2);
    p.insert("bt", uniform(&mut rng, &sbt, -1.0, 1.0))?;
    Ok((
        p,
        Box::new(move |g, p| {
            let a = g.param(p, "a")?;
            let bt = g.param(p, "bt")?;
            let bm = g.transpose(bt)?;
            let y = g.matmul(a, bm)?;
            project(g, y, seed)
        }),
    ))
}

fn expand_select(seed: u64) -> Result<(ParameterSet<f64>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape: Vec<usize> = (0..3).map(|_| rng.gen_range(1..5)).collect();
    let axis = rng.gen_range(0..=3);
    let reps = rng.gen_range(1..4);
    let index = rng.gen_range(0..shape[0]);
    let p = single(uniform(&mut rng, &shape, -1.0, 1.0))?;
    Ok((
        p,
        Box::new(move |g, p| {
            let x = g.param(p, "x")?;
            let e = g.expand(x, axis, reps)?;
            let s = g.select(x, index)?;
            let a = project(g, e, seed)?;
            let b = project(g, s, seed + 1)?;
            g.add(a, b)
        }),
    ))
}

fn pool_reshape(seed: u64) -> Result<(ParameterSet<f64>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..3), 2 * rng.gen_range(1..4), 2 * rng.gen_range(1..4));
    let p = single(uniform(&mut rng, &[n, c * h * w], -1.0, 1.0))?;
    Ok((
        p,
        Box::new(move |g, p| {
            let x = g.param(p, "x")?;
            let r = g.reshape(x, &[n, c, h, w])?;
            let y = g.avg_pool2(r)?;
            project(g, y, seed)
        }),
    ))
}

fn conv_case(seed: u64) -> Result<(ParameterSet<f64>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let stride = rng.gen_range(1..3);
    let pad = rng.gen_range(0..=k / 2);
    // output positions must tile the padded input exactly
    let (h, w) = (
        k - 2 * pad + stride * rng.gen_range(0..4),
        k - 2 * pad + stride * rng.gen_range(0..4),
    );
    let mut p = ParameterSet::new();
    p.insert("x", uniform(&mut rng, &[n, ci, h, w], -1.0, 1.0))?;
    p.insert("k", uniform(&mut rng, &[co, ci, k, k], -1.0, 1.0))?;
    p.insert("b", uniform(&mut rng, &[co], -1.0, 1.0))?;
    Ok((
        p,
        Box::new(move |g, p| {
            let x = g.param(p, "x")?;
            let kv = g.param(p, "k")?;
            let b = g.param(p, "b")?;
            let y = g.conv2d(x, kv, Some(b), stride, pad)?;
            project(g, y, seed)
        }),
    ))
}

fn batchnorm_case(seed: u64, train: bool) -> Result<(ParameterSet<f64>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..4));
    let mut p = ParameterSet::new();
    p.insert("x", uniform(&mut rng, &[n, c, h, w], -1.0, 1.0))?;
    p.insert("gamma", away_from_zero(&mut rng, &[c], true))?;
    p.insert("beta", uniform(&mut rng, &[c], -1.0, 1.0))?;
    let eval_stats = BatchNormStats {
        mean: uniform(&mut rng, &[c], -0.5, 0.5).into_data(),
        var: uniform(&mut rng, &[c], 0.3, 2.0).into_data(),
    };
    Ok((
        p,
        Box::new(move |g, p| {
            let x = g.param(p, "x")?;
            let gamma = g.param(p, "gamma")?;
            let beta = g.param(p, "beta")?;
            let mut stats = BatchNormStats::new(c);
            let mode = if train {
                BatchNormMode::Train {
                    stats: &mut stats,
                    momentum: 0.1,
                }
            } else {
                BatchNormMode::Eval { stats: &eval_stats }
            };
            let y = g.batchnorm2d(x, gamma, beta, mode, 1e-5)?;
            project(g, y, seed)
        }),
    ))
}

fn losses(seed: u64) -> Result<(ParameterSet<f64>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.gen_range(1..6);
    let mut p = ParameterSet::new();
    p.insert("l2", uniform(&mut rng, &[batch, 2], -4.0, 4.0))?;
    p.insert("l4", uniform(&mut rng, &[batch, 4], -4.0, 4.0))?;
    let targets = Tensor::new(&[batch, 2], (0..2 * batch).map(|_| f64::from(rng.gen_range(0..2u8))).collect())?;
    let classes: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..4)).collect();
    Ok((
        p,
        Box::new(move |g, p| {
            let l2 = g.param(p, "l2")?;
            let l4 = g.param(p, "l4")?;
            let a = g.bce_with_logits(l2, &targets)?;
            let b = g.cross_entropy(l4, &classes)?;
            g.add(a, b)
        }),
    ))
}

/// Widths `[4, 8]` on a `1x1x16x32` input, batchnorm in training mode.
fn tiny_backbone(seed: u64) -> Result<(ParameterSet<f64>, Build)> {
    let cfg = BackboneConfig {
        widths: vec![4, 8],
        ..BackboneConfig::default()
    };
    let mut p = init_backbone(&cfg, seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.insert("input", uniform(&mut rng, &[1, 1, 16, 32], -1.0, 1.0))?;
    // non-trivial affine parameters
    for b in 0..2 {
        let bn = crate::backbone::bn_prefix(b);
        let c = cfg.widths[b];
        p.get_mut(&format!("{bn}.gamma"))?.data_mut().copy_from_slice(away_from_zero(&mut rng, &[c], true).data());
        p.get_mut(&format!("{bn}.beta"))?.data_mut().copy_from_slice(uniform(&mut rng, &[c], -0.5, 0.5).data());
    }
    Ok((
        p,
        Box::new(move |g, p| {
            let x = g.param(p, "input")?;
            let mut stats = init_running_stats::<f64>(&cfg);
            let y = forward_features(g, p, &cfg, x, StatsMode::Train(&mut stats))?;
            project(g, y, seed)
        }),
    ))
}

/// `d = 8, f = 2, t = 4, m = 2`, BCE on the head logits.
fn head_case(seed: u64, heads: usize) -> Result<(ParameterSet<f64>, Build)> {
    let cfg = CsraHeadConfig {
        num_heads: heads,
        feature_dim: 8,
        lambda: 0.7,
        ..CsraHeadConfig::default()
    };
    let mut p = init_head(&cfg, seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2;
    p.get_mut(crate::head::CLASSIFIER_PARAM)?
        .data_mut()
        .copy_from_slice(uniform(&mut rng, &cfg.classifier_shape(), -1.0, 1.0).data());
    p.insert("features", uniform(&mut rng, &[n, 8, 2, 4], -1.0, 1.0))?;
    let targets = Tensor::new(&[n, 2], (0..2 * n).map(|_| f64::from(rng.gen_range(0..2u8))).collect())?;
    Ok((
        p,
        Box::new(move |g, p| {
            let x = g.param(p, "features")?;
            let z = csra_logits(g, p, &cfg, x)?;
            g.bce_with_logits(z, &targets)
        }),
    ))
}

fn cases() -> Vec<Case> {
    const S: f64 = 1e-5;
    vec![
        Case { name: "relu", step: S, setup: |s| unary(s, false, |g, x| g.relu(x)) },
        Case { name: "sigmoid", step: S, setup: |s| unary(s, false, |g, x| g.sigmoid(x)) },
        Case { name: "exp", step: S, setup: |s| unary(s, false, |g, x| g.exp(x)) },
        Case { name: "log", step: S, setup: |s| unary(s, true, |g, x| g.log(x)) },
        Case { name: "scale", step: S, setup: |s| unary(s, false, |g, x| g.scale(x, -1.7)) },
        Case { name: "add_scalar", step: S, setup: |s| unary(s, false, |g, x| g.add_scalar(x, 0.3)) },
        Case { name: "add", step: S, setup: |s| binary(s, |g, a, b| g.add(a, b)) },
        Case { name: "sub", step: S, setup: |s| binary(s, |g, a, b| g.sub(a, b)) },
        Case { name: "mul", step: S, setup: |s| binary(s, |g, a, b| g.mul(a, b)) },
        Case { name: "matmul+transpose", step: S, setup: |s| matmul_case(s, false) },
        Case { name: "batched matmul+transpose", step: S, setup: |s| matmul_case(s, true) },
        Case { name: "sum_axis", step: S, setup: |s| axis_op(s, |g, x, a| g.sum_axis(x, a)) },
        Case { name: "mean_axis", step: S, setup: |s| axis_op(s, |g, x, a| g.mean_axis(x, a)) },
        Case { name: "max_axis", step: S, setup: |s| axis_op(s, |g, x, a| g.max_axis(x, a)) },
        Case { name: "softmax", step: S, setup: |s| axis_op(s, |g, x, a| g.softmax(x, a)) },
        Case { name: "expand+select", step: S, setup: expand_select },
        Case { name: "reshape+avg_pool2", step: S, setup: pool_reshape },
        Case { name: "conv2d", step: S, setup: conv_case },
        Case { name: "batchnorm2d train", step: S, setup: |s| batchnorm_case(s, true) },
        Case { name: "batchnorm2d eval", step: S, setup: |s| batchnorm_case(s, false) },
        Case { name: "bce + cross_entropy", step: S, setup: losses },
        Case { name: "backbone [4,8] 16x32", step: 1e-4, setup: tiny_backbone },
        Case { name: "csra head H=1", step: S, setup: |s| head_case(s, 1) },
        Case { name: "csra head H=2", step: S, setup: |s| head_case(s, 2) },
        Case { name: "csra head H=4", step: S, setup: |s| head_case(s, 4) },
        Case { name: "csra head H=6", step: S, setup: |s| head_case(s, 6) },
    ]
}

pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every case whose name contains `filter` (all when `None`).
pub fn gradient_suite(seeds: u64, tolerance: f64, filter: Option<&str>) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        cases: Vec::new(),
        tolerance,
    };
    for case in cases() {
        if filter.is_some_and(|f| !case.name.contains(f)) {
            continue;
        }
        let mut result = SuiteCase {
            name: case.name.to_string(),
            seeds,
            max_rel_error: 0.0,
            worst_seed: 0,
            worst_param: String::new(),
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            refinements: 0,
        };
        for seed in 0..seeds {
            let (params, build) = (case.setup)(seed)?;
            let r = gradient_check(&params, |g, p| build(g, p), case.step, tolerance)?;
            result.refinements += r.refinements;
            for pc in r.params {
                if pc.max_rel_error > result.max_rel_error || result.worst_param.is_empty() {
                    result.max_rel_error = pc.max_rel_error;
                    result.worst_seed = seed;
                    result.worst_param = format!("{}[{}]", pc.name, pc.worst_index);
                    result.worst_analytic = pc.analytic;
                    result.worst_numeric = pc.numeric;
                }
            }
        }
        report.cases.push(result);
    }
    Ok(report)
}
