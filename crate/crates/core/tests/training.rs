mod support;

use mnat::data::{generate_synthetic_task, Batch, SentencePair, TaskKind, MASK};
use mnat::model::{Mode, ModelConfig, NatModel};
use mnat::training::{
    average_checkpoints, checkpoint, consistency_losses, refine_predict, sample_mask, substitute,
    symmetric_kl, ConsistencySign, MaskedTarget, Objective, Provenance, TrainConfig, Trainer,
    UpdateRecord,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::oracles;

fn small_config(vocab: usize, dropout: f32) -> ModelConfig {
    ModelConfig {
        model_dim: 16,
        hidden_dim: 32,
        heads: 2,
        layers_enc: 1,
        layers_dec: 1,
        max_positions: 10,
        max_length_bins: 11,
        dropout_rate: dropout,
        ..ModelConfig::desk(vocab)
    }
}

fn pairs(kind: TaskKind, count: usize, seed: u64) -> Vec<SentencePair> {
    generate_synthetic_task(kind, 16, count, 8, seed).unwrap()
}

fn batch_of(pairs: &[SentencePair]) -> Batch {
    Batch::from_pairs(&pairs.iter().collect::<Vec<_>>())
}

fn quick_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: 1e-3,
        warmup: 20,
        token_budget: 64,
        max_refine_iterations: 4,
        checkpoint_every: 0,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn mask_count_and_position_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 10_000;
    let mut by_count = [0usize; 5];
    let mut by_position = [0usize; 4];
    for _ in 0..draws {
        let m = sample_mask(&[4, 5, 6, 7], &mut rng).unwrap();
        by_count[m.masked.len()] += 1;
        for &p in &m.masked {
            by_position[p] += 1;
        }
    }
    assert_eq!(by_count[0], 0);
    for &c in &by_count[1..] {
        let f = c as f64 / draws as f64;
        assert!((f - 0.25).abs() <= 0.02, "count frequency {f}");
    }
    for &c in &by_position {
        let f = c as f64 / draws as f64;
        assert!((f - 0.625).abs() <= 0.02, "position frequency {f}");
    }
}

#[test]
fn substitution_frequency_matches_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target: Vec<u32> = (4..14).collect();
    let masked = MaskedTarget::from_positions(&target, &[0]).unwrap();
    let predicted: Vec<u32> = target.iter().map(|t| t + 1).collect();
    let (mut observed, mut chosen) = (0usize, 0usize);
    while observed < 10_000 {
        let mixed = substitute(&masked, &predicted, 0.3, &mut rng).unwrap();
        assert_eq!(mixed.tokens[0], MASK);
        for p in 1..target.len() {
            observed += 1;
            match mixed.provenance[p] {
                Provenance::Predicted => {
                    chosen += 1;
                    assert_eq!(mixed.tokens[p], predicted[p]);
                }
                Provenance::GroundTruth => assert_eq!(mixed.tokens[p], target[p]),
                Provenance::Masked => panic!("observed position marked masked"),
            }
        }
    }
    let f = chosen as f64 / observed as f64;
    assert!((f - 0.3).abs() <= 0.015, "predicted fraction {f}");
}

#[test]
fn single_step_prediction_is_positionwise_argmax() {
    let model = NatModel::new(small_config(16, 0.1)).unwrap();
    let source = [4, 9, 12, 7];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (predicted, k) = refine_predict(&model, &source, 6, 1, &mut rng).unwrap();
    assert_eq!(k, 1);
    assert_eq!(predicted.len(), 6);

    let enc = model.encode(&[&source], &mut Mode::Eval).unwrap();
    let out = model
        .decode(&[&[MASK; 6]], &enc, None, &mut Mode::Eval)
        .unwrap();
    let v = model.config.vocab_size;
    for (t, &tok) in predicted.iter().enumerate() {
        let row = &out.logits.data()[out.index(0, t) * v..][..v];
        let best = (4..v)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap();
        assert_eq!(tok as usize, best);
    }

    let mut a = ChaCha8Rng::seed_from_u64(9);
    let mut b = a.clone();
    assert_eq!(
        refine_predict(&model, &source, 5, 6, &mut a).unwrap(),
        refine_predict(&model, &source, 5, 6, &mut b).unwrap()
    );
    assert!(refine_predict(&model, &source, 11, 2, &mut a).is_err());
}

#[test]
fn kl_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..1000 {
        let n = 2 + i % 63;
        let p = oracles::random_distribution(n, &mut rng);
        let q = oracles::random_distribution(n, &mut rng);
        let got = symmetric_kl(&p, &q).unwrap();
        let expected = oracles::symmetric_kl(&p, &q);
        assert!((got - expected).abs() <= 1e-6, "{got} vs {expected}");
        assert!(got >= 0.0);
        assert_eq!(got, symmetric_kl(&q, &p).unwrap());
    }
    let worked = symmetric_kl(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
    assert!((worked - 0.4394).abs() <= 1e-3);
}

#[test]
fn consistency_penalties_are_nonnegative_and_vanish_only_on_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let d: Vec<Vec<f64>> = (0..3)
            .map(|_| oracles::random_distribution(6, &mut rng))
            .collect();
        let (k1, k2) =
            consistency_losses(&[d[0].clone()], &[d[1].clone()], &[d[2].clone()]).unwrap();
        assert!(k1 > 0.0 && k2 > 0.0);
        let (k1, k2) =
            consistency_losses(&[d[0].clone()], &[d[0].clone()], &[d[0].clone()]).unwrap();
        assert_eq!((k1, k2), (0.0, 0.0));
    }
}

#[test]
fn degenerate_views_agree_without_substitution_or_dropout() {
    for seed in 0..4 {
        let model = NatModel::new(ModelConfig {
            seed,
            ..small_config(16, 0.0)
        })
        .unwrap();
        let cfg = TrainConfig {
            beta: 0.0,
            ..quick_train_config(seed)
        };
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let batch = batch_of(&pairs(TaskKind::Reverse, 6, seed));
        let (l, _) = trainer.compute_losses(&batch).unwrap();
        assert!((l.nll1 - l.nll3).abs() <= 1e-5, "{l:?}");
        assert!((l.nll2 - l.nll3).abs() <= 1e-5, "{l:?}");
        assert!(l.kld1.abs() <= 1e-6 && l.kld2.abs() <= 1e-6, "{l:?}");
        assert!((l.total - (l.nll3 + l.len_loss)).abs() <= 1e-5, "{l:?}");
    }
}

#[test]
fn logged_totals_recompose() {
    let model = NatModel::new(small_config(16, 0.1)).unwrap();
    let cfg = TrainConfig {
        max_updates: 60,
        ..quick_train_config(2)
    };
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let mut lines = Vec::new();
    trainer
        .train(
            &pairs(TaskKind::Copy, 40, 2),
            None,
            |r| {
                lines.push(r.log_line());
                Ok(())
            },
            |_, _| Ok(std::ops::ControlFlow::Continue(())),
        )
        .unwrap();
    assert_eq!(lines.len(), 60);
    for line in &lines {
        let r = UpdateRecord::parse_log_line(line, 0.4, 0.3).unwrap();
        let recomposed = r.losses.recompose(ConsistencySign::Positive);
        assert!((recomposed - r.losses.total as f64).abs() <= 1e-6, "{line}");
        assert!(r.losses.kld1 >= 0.0 && r.losses.kld2 >= 0.0);
    }
}

#[test]
fn prediction_pass_contributes_no_gradient() {
    let batch = batch_of(&pairs(TaskKind::Lexicon, 5, 4));
    let grads_for = |k: usize| {
        let model = NatModel::new(small_config(16, 0.1)).unwrap();
        let cfg = TrainConfig {
            beta: 0.0,
            ..quick_train_config(4)
        };
        let mut trainer = Trainer::new(model, cfg).unwrap();
        trainer.forced_k = Some(k);
        let params = trainer.model.params.tensors();
        let (losses, grads) = trainer.compute_losses(&batch).unwrap();
        let flat: Vec<Vec<f32>> = params
            .iter()
            .map(|p| grads.get(p).unwrap().to_vec())
            .collect();
        (losses.total, flat)
    };
    let (t1, g1) = grads_for(1);
    let (t4, g4) = grads_for(4);
    assert_eq!(t1.to_bits(), t4.to_bits());
    assert_eq!(g1, g4);
}

#[test]
fn zero_weight_regularized_run_tracks_plain_training() {
    let data = pairs(TaskKind::Reverse, 60, 6);
    let run = |objective: Objective| {
        let model = NatModel::new(small_config(16, 0.0)).unwrap();
        let cfg = TrainConfig {
            beta: 0.0,
            gamma: 0.0,
            objective,
            max_updates: 30,
            ..quick_train_config(6)
        };
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let mut totals = Vec::new();
        trainer
            .train(
                &data,
                None,
                |r| {
                    totals.push(r.losses.total);
                    Ok(())
                },
                |_, _| Ok(std::ops::ControlFlow::Continue(())),
            )
            .unwrap();
        totals
    };
    let regularized = run(Objective::Eecr);
    let plain = run(Objective::Cmlm);
    assert_eq!(regularized.len(), 30);
    for (step, (a, b)) in regularized.iter().zip(&plain).enumerate() {
        assert!((a - b).abs() <= 1e-6, "update {}: {a} vs {b}", step + 1);
    }
}

#[test]
fn copy_task_loss_decreases() {
    let model = NatModel::new(ModelConfig {
        max_positions: 8,
        max_length_bins: 9,
        ..small_config(16, 0.1)
    })
    .unwrap();
    let cfg = TrainConfig {
        max_updates: 500,
        token_budget: 128,
        ..quick_train_config(3)
    };
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let mut nll3 = Vec::new();
    trainer
        .train(
            &pairs(TaskKind::Copy, 400, 3),
            None,
            |r| {
                nll3.push(r.losses.nll3);
                Ok(())
            },
            |_, _| Ok(std::ops::ControlFlow::Continue(())),
        )
        .unwrap();
    assert_eq!(nll3.len(), 500);
    assert!(nll3[499] < nll3[0], "first {} last {}", nll3[0], nll3[499]);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let model = NatModel::new(small_config(16, 0.1)).unwrap();
        let cfg = TrainConfig {
            max_updates: 12,
            checkpoint_every: 4,
            average_last: 2,
            ..quick_train_config(9)
        };
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let policy = mnat::training::CheckpointPolicy {
            dir: dir.path().join(name),
        };
        let summary = trainer
            .train(
                &pairs(TaskKind::Lexicon, 30, 9),
                Some(&policy),
                |_| Ok(()),
                |_, _| Ok(std::ops::ControlFlow::Continue(())),
            )
            .unwrap();
        assert_eq!(summary.checkpoints.len(), 2);
        assert_eq!(std::fs::read_dir(dir.path().join(name)).unwrap().count(), 2);
        summary.checkpoints
    };
    let a = run("a");
    let b = run("b");
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let avg_a = average_checkpoints(&a).unwrap();
    let avg_b = average_checkpoints(&b).unwrap();
    assert!(avg_a.params.bitwise_eq(&avg_b.params));
}

#[test]
fn averaging_examples() {
    let dir = tempfile::tempdir().unwrap();
    let model = NatModel::new(small_config(16, 0.1)).unwrap();
    let trainer = Trainer::new(model, quick_train_config(1)).unwrap();
    let ckpt = trainer.checkpoint();
    let paths: Vec<_> = (0..4)
        .map(|i| dir.path().join(format!("{i}.mnat")))
        .collect();
    for p in &paths {
        checkpoint::save(&ckpt, p).unwrap();
    }
    let single = average_checkpoints(&paths[..1]).unwrap();
    assert!(single.params.bitwise_eq(&ckpt.params));
    let many = average_checkpoints(&paths).unwrap();
    for ((_, a), (_, b)) in many.params.iter().zip(ckpt.params.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-7);
        }
    }
    let empty: [&std::path::Path; 0] = [];
    assert!(average_checkpoints(&empty).is_err());
}

#[test]
fn failed_write_keeps_previous_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.mnat");
    let model = NatModel::new(small_config(16, 0.1)).unwrap();
    let mut trainer = Trainer::new(model, quick_train_config(1)).unwrap();
    checkpoint::save(&trainer.checkpoint(), &path).unwrap();
    let before = std::fs::read(&path).unwrap();
    trainer
        .step(&batch_of(&pairs(TaskKind::Copy, 3, 1)))
        .unwrap();
    // A directory squatting on the temporary name makes the write fail.
    std::fs::create_dir(dir.path().join("last.mnat.tmp")).unwrap();
    assert!(checkpoint::save(&trainer.checkpoint(), &path).is_err());
    assert_eq!(std::fs::read(&path).unwrap(), before);
    assert!(checkpoint::load(&path).is_ok());
}

#[test]
fn resumed_trainer_keeps_optimizer_state() {
    let model = NatModel::new(small_config(16, 0.1)).unwrap();
    let mut trainer = Trainer::new(model, quick_train_config(1)).unwrap();
    trainer
        .step(&batch_of(&pairs(TaskKind::Copy, 3, 1)))
        .unwrap();
    let ckpt = trainer.checkpoint();
    let resumed = Trainer::from_checkpoint(ckpt.clone(), quick_train_config(1)).unwrap();
    assert_eq!(resumed.step, 1);
    assert_eq!(resumed.adam, ckpt.adam);
    assert!(resumed.model.params.bitwise_eq(&trainer.model.params));
}
