use msod_core::data::{synth_scene, SceneSpec};
use msod_core::model::{Model, ModelConfig};
use msod_core::train::{sample_gradients, train, Adam, Sample, TrainConfig};
use msod_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene_sample(size: usize, seed: u64) -> Sample {
    synth_scene(&SceneSpec::new(size, size, 1), seed)
        .unwrap()
        .sample()
}

#[test]
fn one_small_step_reduces_the_sample_loss() {
    let mut decreased = 0;
    for trial in 0..100u64 {
        let sample = scene_sample(16, 500 + trial);
        let mut model = Model::new(ModelConfig::tiny(), trial).unwrap();
        let (before, grads) = sample_gradients(&model, &sample).unwrap();
        let mut adam = Adam::new(&model.params, 0.9, 0.999, 1e-8);
        adam.step(&mut model.params, &grads, 1e-4).unwrap();
        let (after, _) = sample_gradients(&model, &sample).unwrap();
        if after < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 95, "loss fell in {decreased}/100 trials");
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let data: Vec<Sample> = (0..3).map(|i| scene_sample(16, i)).collect();
    let mut model = Model::new(ModelConfig::tiny(), 7).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig {
        steps: 5,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &data, &cfg, |_| {}).unwrap();
    assert_eq!(history.records.len(), 5);
    for ((na, a), (nb, b)) in before.iter().zip(model.params.iter()) {
        assert_eq!(na, nb);
        let same = a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{na} moved");
    }
}

#[test]
fn training_is_deterministic() {
    let data: Vec<Sample> = (0..3).map(|i| scene_sample(16, i)).collect();
    let run = || {
        let mut model = Model::new(ModelConfig::tiny(), 3).unwrap();
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let h = train(&mut model, &data, &cfg, |_| {}).unwrap();
        (model.params, h.losses())
    };
    assert_eq!(run(), run());
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-3.0..3.0))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, cols], &mut rng);
        let mut t = Tape::new();
        let a = t.constant(x.clone());
        let b = t.constant(x.map(|v| v + shift));
        let sa = t.softmax(a, 1).unwrap();
        let sb = t.softmax(b, 1).unwrap();
        for r in 0..rows {
            let row = &t.value(sa).data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
        prop_assert!(t.value(sa).max_abs_diff(t.value(sb)) <= 1e-12);
    }

    #[test]
    fn upsample_to_own_size_is_identity(
        c in 1usize..4, h in 1usize..8, w in 1usize..8, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[c, h, w], &mut rng);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let u = t.upsample_bilinear(v, (h, w)).unwrap();
        prop_assert_eq!(t.value(u), &x);
    }

    #[test]
    fn upsample_keeps_corners_and_constants(
        h in 2usize..6, w in 2usize..6, th in 2usize..12, tw in 2usize..12, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, h, w], &mut rng);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let u = t.upsample_bilinear(v, (th, tw)).unwrap();
        let o = t.value(u).data().to_vec();
        let xd = x.data();
        for (got, want) in [
            (o[0], xd[0]),
            (o[tw - 1], xd[w - 1]),
            (o[(th - 1) * tw], xd[(h - 1) * w]),
            (o[th * tw - 1], xd[h * w - 1]),
        ] {
            prop_assert!((got - want).abs() <= 1e-12);
        }
        let k = t.constant(Tensor::full(&[1, h, w], 0.37));
        let ku = t.upsample_bilinear(k, (th, tw)).unwrap();
        prop_assert!(t.value(ku).data().iter().all(|&v| (v - 0.37).abs() <= 1e-15));
    }

    #[test]
    fn matmul_by_identity_is_exact(m in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, n], &mut rng);
        let mut t = Tape::new();
        let av = t.constant(a.clone());
        let left = t.constant(Tensor::eye(m));
        let right = t.constant(Tensor::eye(n));
        let l = t.matmul(left, av).unwrap();
        let r = t.matmul(av, right).unwrap();
        prop_assert_eq!(t.value(l), &a);
        prop_assert_eq!(t.value(r), &a);
    }

    #[test]
    fn matmul_matches_triple_loop(
        m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let p = t.matmul(av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|q| a.data()[i * k + q] * b.data()[q * n + j]).sum();
                prop_assert!((t.value(p).data()[i * n + j] - want).abs() <= 1e-12);
            }
        }
    }
}
