use multibreath::autodiff::{Graph, ParameterSet, Tensor};
use multibreath::data::{CycleClass, LabelVector};
use multibreath::head::CLASSIFIER_PARAM;
use multibreath::model::{LossMode, Model, ModelConfig};
use multibreath::train::{
    bce_loss, cosine_lr, cross_entropy_loss, Adam, AdamConfig, Checkpoint, FeatureSet, TrainConfig, Trainer,
    CHECKPOINT_VERSION,
};
use multibreath::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labels_of(classes: &[usize]) -> Vec<LabelVector> {
    classes.iter().map(|&c| LabelVector::from_class(CycleClass::from_index(c).unwrap())).collect()
}

fn loss_and_grad(
    logits: &[f64],
    shape: &[usize],
    f: impl Fn(&mut Graph<f64>, multibreath::autodiff::Var) -> multibreath::Result<multibreath::autodiff::Var>,
) -> (f64, Vec<f64>) {
    let mut p = ParameterSet::<f64>::new();
    p.insert("z", Tensor::new(shape, logits.to_vec()).unwrap()).unwrap();
    let mut g = Graph::<f64>::new();
    let z = g.param(&p, "z").unwrap();
    let loss = f(&mut g, z).unwrap();
    g.backward(loss, &mut p).unwrap();
    (g.value(loss).data()[0], p.get("z").unwrap().grad().unwrap().to_vec())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn bce_saturated_correct_is_near_zero() {
    let labels = [LabelVector::new(1, 0).unwrap()];
    let (loss, _) = loss_and_grad(&[20.0, -20.0], &[1, 2], |g, z| bce_loss(g, z, &labels));
    assert!(loss < 1e-8, "{loss}");
}

#[test]
fn bce_of_zero_logits_is_ln2() {
    for bits in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        let labels = [LabelVector::new(bits.0, bits.1).unwrap()];
        let (loss, _) = loss_and_grad(&[0.0, 0.0], &[1, 2], |g, z| bce_loss(g, z, &labels));
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

#[test]
fn bce_rejects_non_finite_logits() {
    let labels = [LabelVector::new(1, 0).unwrap()];
    let mut g = Graph::<f32>::new();
    let big = g.constant(Tensor::new(&[1, 2], vec![100.0, 0.0]).unwrap()).unwrap();
    let outcome = match g.exp(big) {
        Ok(z) => bce_loss(&mut g, z, &labels).map(|_| ()),
        Err(e) => Err(e),
    };
    assert!(matches!(outcome, Err(Error::NonFinite(_))), "{outcome:?}");
}

#[test]
fn ce_saturated_and_uniform() {
    let labels = labels_of(&[2]);
    let (loss, _) = loss_and_grad(&[-30.0, -30.0, 30.0, -30.0], &[1, 4], |g, z| cross_entropy_loss(g, z, &labels));
    assert!(loss < 1e-8);
    let (loss, _) = loss_and_grad(&[0.7; 4], &[1, 4], |g, z| cross_entropy_loss(g, z, &labels));
    assert!((loss - 4f64.ln()).abs() < 1e-12);
}

fn random_logits(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bce_gradient_is_sigmoid_minus_target_over_count(seed in 0u64..1000, n in 1usize..6) {
        let logits = random_logits(seed, 2 * n);
        let labels = labels_of(&(0..n).map(|i| (seed as usize + i) % 4).collect::<Vec<_>>());
        let (loss, grad) = loss_and_grad(&logits, &[n, 2], |g, z| bce_loss(g, z, &labels));
        prop_assert!(loss >= 0.0);
        let count = (2 * n) as f64;
        for (i, (&l, &gr)) in logits.iter().zip(&grad).enumerate() {
            let lv = labels[i / 2];
            let y = if i % 2 == 0 { lv.crackle } else { lv.wheeze } as u8 as f64;
            prop_assert!((gr - (sigmoid(l) - y) / count).abs() < 1e-12);
        }
        // central differences of the direct formula
        let direct = |z: &[f64]| -> f64 {
            z.iter().enumerate().map(|(i, &l)| {
                let lv = labels[i / 2];
                let y = if i % 2 == 0 { lv.crackle } else { lv.wheeze } as u8 as f64;
                let p = sigmoid(l);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            }).sum::<f64>() / count
        };
        prop_assert!((direct(&logits) - loss).abs() < 1e-10);
        for i in 0..logits.len() {
            let h = 1e-5;
            let mut a = logits.clone();
            let mut b = logits.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (direct(&a) - direct(&b)) / (2.0 * h);
            prop_assert!((fd - grad[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot(seed in 0u64..1000, n in 1usize..5) {
        let logits = random_logits(seed, 4 * n);
        let classes: Vec<usize> = (0..n).map(|i| (seed as usize * 7 + i) % 4).collect();
        let labels = labels_of(&classes);
        let (_, grad) = loss_and_grad(&logits, &[n, 4], |g, z| cross_entropy_loss(g, z, &labels));
        for r in 0..n {
            let row = &logits[4 * r..4 * r + 4];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for k in 0..4 {
                let expected = (row[k].exp() / z - if k == classes[r] { 1.0 } else { 0.0 }) / n as f64;
                prop_assert!((grad[4 * r + k] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_schedule_never_increases(total in 1u64..500, lr in 1e-5f64..1e-1, frac in 0.0f64..1.0) {
        let eta_min = lr * frac;
        let mut prev = f64::INFINITY;
        for s in 0..=total + 3 {
            let v = cosine_lr(s, total, lr, eta_min);
            prop_assert!(v <= prev && v >= eta_min - 1e-18);
            prev = v;
        }
    }
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine_lr(0, 1000, 1e-3, 0.0), 1e-3);
    assert_eq!(cosine_lr(1000, 1000, 1e-3, 0.0), 0.0);
    assert!((cosine_lr(500, 1000, 1e-3, 0.0) - 5e-4).abs() < 1e-15);
    assert_eq!(cosine_lr(1001, 1000, 1e-3, 0.0), 0.0);
}

fn scalar_param(value: f32) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.insert("theta", Tensor::scalar(value)).unwrap();
    p
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = scalar_param(0.25);
    p.get_mut("theta").unwrap().accumulate_grad(&[0.0]).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    adam.update(&mut p, 1e-3).unwrap();
    assert_eq!(p.get("theta").unwrap().data()[0], 0.25);
    assert_eq!(adam.step, 1);
}

#[test]
fn adam_first_unit_step_moves_by_lr() {
    let mut p = scalar_param(1.0);
    p.get_mut("theta").unwrap().accumulate_grad(&[1.0]).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    adam.update(&mut p, 1e-3).unwrap();
    let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
    assert!((f64::from(p.get("theta").unwrap().data()[0]) - expected).abs() < 1e-7);
}

#[test]
fn adam_descends_a_parabola() {
    let mut p = scalar_param(1.0);
    let mut adam = Adam::new(AdamConfig::default());
    let mut prev = 1.0f32;
    for _ in 0..10 {
        let theta = p.get("theta").unwrap().data()[0];
        let t = p.get_mut("theta").unwrap();
        t.zero_grad();
        t.accumulate_grad(&[2.0 * theta]).unwrap();
        adam.update(&mut p, 0.05).unwrap();
        let f = p.get("theta").unwrap().data()[0].powi(2);
        assert!(f < prev);
        prev = f;
    }
}

#[test]
fn adam_rejects_bad_gradients_without_mutating() {
    let mut p = scalar_param(1.0);
    p.insert("other", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
    p.get_mut("theta").unwrap().accumulate_grad(&[1.0]).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    assert!(matches!(adam.update(&mut p, 1e-3), Err(Error::Validation(_))));
    p.get_mut("other").unwrap().accumulate_grad(&[f32::NAN, 0.0]).unwrap();
    let before: Vec<Vec<f32>> = p.iter().map(|(_, t)| t.data().to_vec()).collect();
    assert!(matches!(adam.update(&mut p, 1e-3), Err(Error::NonFinite(_))));
    let after: Vec<Vec<f32>> = p.iter().map(|(_, t)| t.data().to_vec()).collect();
    assert_eq!(after, before);
    assert_eq!(adam.step, 0);
    assert!(adam.moments.is_empty());
}

fn tiny_config(num_heads: usize, loss_mode: LossMode) -> ModelConfig {
    sized_config(&[4, 8], num_heads, loss_mode)
}

fn sized_config(widths: &[usize], num_heads: usize, loss_mode: LossMode) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.backbone.widths = widths.to_vec();
    c.head.feature_dim = *widths.last().unwrap();
    c.head.num_heads = num_heads;
    c.head.num_classes = loss_mode.num_outputs();
    c.loss_mode = loss_mode;
    c
}

fn random_features(seed: u64, n: usize) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = 64 * 256;
    FeatureSet {
        n_mels: 64,
        n_frames: 256,
        images: (0..n * per).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
        labels: labels_of(&(0..n).map(|i| i % 4).collect::<Vec<_>>()),
        patients: (0..n as u32).collect(),
    }
}

fn tiny_train_config(batch_size: usize, epochs: usize, lr: f64, augment: bool) -> TrainConfig {
    TrainConfig {
        batch_size,
        epochs,
        learning_rate: lr,
        augment,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_one_batch() {
    for mode in [LossMode::MultilabelBce, LossMode::SinglelabelCe] {
        let data = random_features(3, 8);
        let model = Model::new(sized_config(&[8, 16], 2, mode), 5).unwrap();
        let mut trainer = Trainer::new(model, tiny_train_config(8, 200, 1e-2, false), 8).unwrap();
        let mut last = f32::INFINITY;
        for _ in 0..200 {
            last = trainer.step(data.images.clone(), &data.labels).unwrap();
        }
        assert!(last < 0.05, "{mode:?}: final loss {last}");
        let preds = trainer.model.predict(&data.images).unwrap();
        let hits = preds.iter().zip(&data.labels).filter(|(p, l)| p.labels == **l).count();
        assert_eq!(hits, 8, "{mode:?}");
    }
}

#[test]
fn epoch_runs_ceil_n_over_batch_steps() {
    let data = random_features(4, 130);
    let model = Model::new(tiny_config(1, LossMode::MultilabelBce), 1).unwrap();
    let mut trainer = Trainer::new(model, tiny_train_config(64, 2, 1e-3, true), data.len()).unwrap();
    assert_eq!(trainer.total_steps, 6);
    let log = trainer.train_epoch(&data).unwrap();
    assert_eq!(log.steps, 3);
    assert_eq!(log.batch_losses.len(), 3);
    assert_eq!(trainer.optimizer.step, 3);
    assert_eq!(log.lr_start, 1e-3);
    assert!((log.lr_end - cosine_lr(2, 6, 1e-3, 0.0)).abs() < 1e-18);
}

fn run_twice_bytes(seed: u64) -> (Vec<Vec<u32>>, Vec<u8>) {
    let data = random_features(6, 20);
    let model = Model::new(tiny_config(4, LossMode::MultilabelBce), seed).unwrap();
    let mut cfg = tiny_train_config(8, 2, 1e-3, true);
    cfg.seed = seed;
    let mut trainer = Trainer::new(model, cfg, data.len()).unwrap();
    let mut traces = Vec::new();
    for _ in 0..2 {
        let log = trainer.train_epoch(&data).unwrap();
        traces.push(log.batch_losses.iter().map(|v| v.to_bits()).collect());
    }
    (traces, Checkpoint::from_trainer(&trainer, None).to_bytes().unwrap())
}

#[test]
fn training_is_bit_reproducible() {
    let a = run_twice_bytes(11);
    let b = run_twice_bytes(11);
    assert_eq!(a, b);
    let c = run_twice_bytes(12);
    assert_ne!(a.0, c.0);
}

#[test]
fn non_finite_input_aborts_with_diagnostics() {
    let mut data = random_features(2, 10);
    data.images[64 * 256 * 7 + 5] = f32::NAN;
    let model = Model::new(tiny_config(1, LossMode::MultilabelBce), 1).unwrap();
    let mut trainer = Trainer::new(model, tiny_train_config(4, 1, 1e-3, false), 10).unwrap();
    let err = trainer.train_epoch(&data).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let msg = err.to_string();
    assert!(msg.contains("samples") && msg.contains('7'), "{msg}");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = random_features(8, 12);
    let fresh = || {
        let model = Model::new(tiny_config(2, LossMode::MultilabelBce), 3).unwrap();
        Trainer::new(model, tiny_train_config(6, 3, 1e-3, true), data.len()).unwrap()
    };
    let mut straight = fresh();
    for _ in 0..3 {
        straight.train_epoch(&data).unwrap();
    }
    let mut first = fresh();
    first.train_epoch(&data).unwrap();
    let bytes = Checkpoint::from_trainer(&first, None).to_bytes().unwrap();
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().trainer(data.len()).unwrap();
    for _ in 0..2 {
        resumed.train_epoch(&data).unwrap();
    }
    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.optimizer, straight.optimizer);
}

fn trained_tiny() -> (Model, FeatureSet) {
    let data = random_features(9, 16);
    let model = Model::new(tiny_config(4, LossMode::MultilabelBce), 2).unwrap();
    let mut trainer = Trainer::new(model, tiny_train_config(8, 1, 1e-3, true), data.len()).unwrap();
    trainer.train_epoch(&data).unwrap();
    (trainer.model, data)
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let (model, _) = trained_tiny();
    let probe = random_features(10, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    Checkpoint::from_model(&model, &TrainConfig::default(), None).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model().unwrap();
    let a: Vec<u32> = model.logits(&probe.images).unwrap().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = loaded.logits(&probe.images).unwrap().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
    assert_eq!(loaded.stats, model.stats);
}

#[test]
fn checkpoint_errors_are_distinct() {
    let (model, _) = trained_tiny();
    let bytes = Checkpoint::from_model(&model, &TrainConfig::default(), None).to_bytes().unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Format(_))));

    let mut bad_version = bytes.clone();
    bad_version[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&bad_version),
        Err(Error::Version { found, .. }) if found == CHECKPOINT_VERSION + 1
    ));

    for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
    }

    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let mut other = Model::new(tiny_config(2, LossMode::MultilabelBce), 2).unwrap();
    match ck.restore(&mut other) {
        Err(Error::Shape(msg)) => assert!(msg.contains(CLASSIFIER_PARAM), "{msg}"),
        other => panic!("expected a shape error, got {other:?}"),
    }
}
