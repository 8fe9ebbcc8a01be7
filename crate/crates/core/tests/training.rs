use perturbkey::datasets::logo;
use perturbkey::decoder::KeyImage;
use perturbkey::objective::GradientRouting;
use perturbkey::trainer::{
    compute_gradients, load_checkpoint, plan_batch, train, train_step, SecretBook, TrainConfig,
    TrainState,
};
use perturbkey::ImageArray;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn covers(n: usize, res: (usize, usize), seed: u64) -> Vec<ImageArray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            ImageArray::new(res.0, res.1, (0..res.0 * res.1 * 3).map(|_| rng.gen()).collect())
                .unwrap()
                .quantize()
        })
        .collect()
}

fn book(res: (usize, usize)) -> SecretBook {
    SecretBook::new(vec![
        (KeyImage::solid(res, [255, 0, 0], "red").unwrap(), logo(res, 1)),
        (KeyImage::solid(res, [0, 255, 0], "green").unwrap(), logo(res, 2)),
    ])
    .unwrap()
}

fn toy(res: (usize, usize)) -> TrainConfig {
    TrainConfig {
        resolution: res,
        batch_size: 4,
        eval_interval: 1,
        checkpoint_interval: 5,
        embed_channels: 4,
        base_channels: 8,
        ..TrainConfig::desk()
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let res = (32, 32);
    let data = covers(8, res, 1);
    let b = book(res);
    let full_cfg = TrainConfig {
        max_iter: 12,
        ..toy(res)
    };
    let full = train(&full_cfg, &data, &b, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let half_cfg = TrainConfig {
        max_iter: 5,
        ..full_cfg.clone()
    };
    train(&half_cfg, &data, &b, Some(dir.path()), None).unwrap();
    let restored = load_checkpoint(dir.path()).unwrap();
    assert_eq!(restored.iteration, 5);
    let resumed = train(&full_cfg, &data, &b, Some(dir.path()), Some(restored)).unwrap();

    let max_diff = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(max_diff(full.state.perturbation.values(), resumed.state.perturbation.values()) <= 1e-6);
    assert!(max_diff(full.state.decoder.values(), resumed.state.decoder.values()) <= 1e-6);
    assert_eq!(full.log, resumed.log);
    let on_disk = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(on_disk.lines().count(), 12);
}

#[test]
fn literal_routing_only_shrinks_delta() {
    // With λ = 0 the perturbation only sees the encoding loss, which pulls it
    // toward zero.
    let res = (32, 32);
    let data = covers(4, res, 2);
    let b = book(res);
    let cfg = TrainConfig {
        lambda: 0.0,
        gradient_routing: GradientRouting::LiteralAlg1,
        ..toy(res)
    };
    let mut state = TrainState::init(&cfg).unwrap();
    let mut norms = vec![state.perturbation.l2_norm()];
    for _ in 0..100 {
        train_step(&mut state, &data, &b, &cfg).unwrap();
        norms.push(state.perturbation.l2_norm());
    }
    for w in norms.windows(2) {
        assert!(w[1] <= w[0], "norm grew from {} to {}", w[0], w[1]);
    }
    assert!(norms[100] < norms[0]);
}

#[test]
fn joint_objective_decreases_on_fixed_batch() {
    let cfg = TrainConfig {
        seeds: perturbkey::trainer::Seeds {
            carrier: 0,
            decoder: 0,
            trainer: 0,
        },
        ..TrainConfig::desk()
    };
    let data = covers(cfg.batch_size, cfg.resolution, 0);
    let b = book(cfg.resolution);
    let mut state = TrainState::init(&cfg).unwrap();
    let (first, _) = train_step(&mut state, &data, &b, &cfg).unwrap();
    let mut last = first;
    for _ in 1..200 {
        last = train_step(&mut state, &data, &b, &cfg).unwrap().0;
    }
    assert!(last.total < first.total, "total went from {} to {}", first.total, last.total);
}

#[test]
fn literal_routing_ignores_decoder_losses_for_delta() {
    let res = (16, 16);
    let cfg = TrainConfig {
        batch_size: 2,
        ..toy(res)
    };
    let data = covers(2, res, 3);
    let b = book(res);
    let state = TrainState::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plan = plan_batch(&mut rng, data.len(), &b, &cfg, 0).unwrap();
    let delta: Vec<f64> = state.perturbation.values().iter().map(|&v| f64::from(v)).collect();
    let joint = compute_gradients(&delta, &state.decoder, &data, &b, &plan, 0.05, GradientRouting::Joint).unwrap();
    let literal =
        compute_gradients(&delta, &state.decoder, &data, &b, &plan, 0.05, GradientRouting::LiteralAlg1).unwrap();
    assert_eq!(joint.theta_grad, literal.theta_grad);
    assert_ne!(joint.delta_grad, literal.delta_grad);
    // The literal δ-gradient is exactly the encoding-loss gradient.
    let n = (data.len() * 16 * 16 * 3) as f64;
    for (i, g) in literal.delta_grad.iter().enumerate() {
        let expected: f64 = plan
            .cover_index
            .iter()
            .map(|&c| {
                let v = data[c].as_slice()[i] + delta[i];
                if (0.0..=1.0).contains(&v) {
                    2.0 * delta[i] / n
                } else {
                    0.0
                }
            })
            .sum();
        assert!((g - expected).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn delta_stays_in_ball(seed in 0u64..1000, lr_exp in -3i32..-1) {
        let res = (16, 16);
        let cfg = TrainConfig {
            learning_rate: 10f64.powi(lr_exp),
            seeds: perturbkey::trainer::Seeds { carrier: seed, decoder: seed, trainer: seed },
            ..toy(res)
        };
        let data = covers(4, res, seed);
        let b = book(res);
        let mut state = TrainState::init(&cfg).unwrap();
        for _ in 0..5 {
            train_step(&mut state, &data, &b, &cfg).unwrap();
            prop_assert!(state.perturbation.linf_norm() <= cfg.epsilon);
        }
    }

    #[test]
    fn key_assignment_is_balanced(bs in 1usize..20, n in 1usize..7, start in 0u64..50) {
        let mut seq = Vec::new();
        for it in start..start + 5 {
            for j in 0..bs {
                seq.push(perturbkey::trainer::balanced_key_index(it, bs, j, n));
            }
        }
        for window in seq.windows(n) {
            let mut counts = vec![0usize; n];
            for &k in window {
                counts[k] += 1;
            }
            prop_assert!(counts.iter().all(|&c| c == 1));
        }
    }
}
