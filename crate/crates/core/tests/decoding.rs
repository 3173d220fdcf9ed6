use mnat::data::{LENGTH, MASK, PAD};
use mnat::decoding::{mask_predict, masking_schedule, refine, select_lowest_confidence};
use mnat::model::{Mode, ModelConfig, NatModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> NatModel {
    NatModel::new(ModelConfig {
        model_dim: 16,
        hidden_dim: 32,
        heads: 2,
        layers_enc: 1,
        layers_dec: 1,
        max_positions: 12,
        max_length_bins: 13,
        seed,
        ..ModelConfig::desk(20)
    })
    .unwrap()
}

#[test]
fn schedule_matches_closed_form_on_grid() {
    for n in 1..=32usize {
        for total in 1..=10usize {
            for t in 0..=total {
                let got = masking_schedule(n, t, total);
                if t >= 1 && t < total {
                    let expected = (n as f64 * (total - t) as f64 / total as f64).floor() as usize;
                    assert_eq!(got.unwrap(), expected, "n={n} t={t} T={total}");
                } else {
                    assert!(got.is_err(), "n={n} t={t} T={total}");
                }
            }
        }
    }
}

#[test]
fn selection_is_ordered_by_confidence_then_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(1..20);
        let conf: Vec<f32> = (0..n).map(|_| (rng.gen_range(0..5) as f32) / 4.0).collect();
        let k = rng.gen_range(0..=n);
        let chosen = select_lowest_confidence(&conf, k).unwrap();
        assert_eq!(chosen.len(), k);
        assert!(chosen.windows(2).all(|w| w[0] < w[1]));
        for &c in &chosen {
            for u in (0..n).filter(|u| !chosen.contains(u)) {
                assert!(conf[c] < conf[u] || (conf[c] == conf[u] && c < u));
            }
        }
    }
}

#[test]
fn unselected_tokens_survive_each_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for case in 0..100u64 {
        let m = model(case % 7);
        let len = rng.gen_range(1..=12);
        let source: Vec<u32> = (0..rng.gen_range(1..=12))
            .map(|_| rng.gen_range(4..20))
            .collect();
        let iterations = rng.gen_range(2..=6);
        let enc = m.encode(&[&source], &mut Mode::Eval).unwrap();
        let out = refine(&m, &enc, &[0], &[len], iterations, true)
            .unwrap()
            .remove(0);
        assert_eq!(out.state.tokens.len(), len);
        for step in &out.trace {
            for p in 0..len {
                if !step.remasked.contains(&p) {
                    assert_eq!(
                        step.before[p], step.after[p],
                        "case {case} iteration {}",
                        step.iteration
                    );
                    checked += 1;
                }
            }
            assert_eq!(
                step.remasked.len(),
                masking_schedule(len, step.iteration - 1, iterations).unwrap()
            );
        }
        assert!(out
            .state
            .tokens
            .iter()
            .all(|&t| t != PAD && t != MASK && t != LENGTH));
    }
    assert!(checked > 0);
}

#[test]
fn refinement_stops_once_an_iteration_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut early = 0;
    for case in 0..60u64 {
        let m = model(case);
        let source: Vec<u32> = (0..rng.gen_range(1..=10))
            .map(|_| rng.gen_range(4..20))
            .collect();
        let len = rng.gen_range(2..=12);
        let enc = m.encode(&[&source], &mut Mode::Eval).unwrap();
        let out = refine(&m, &enc, &[0], &[len], 10, true).unwrap().remove(0);
        for (i, step) in out.trace.iter().enumerate() {
            let last = i + 1 == out.trace.len();
            assert_eq!(step.before == step.after, last && out.converged);
        }
        if out.converged {
            assert_eq!(out.state.iteration, out.trace.last().unwrap().iteration);
            if out.state.iteration < 10 {
                early += 1;
            }
        }
    }
    assert!(early > 0, "no run stopped early");
}

#[test]
fn noisy_parallel_decoding_picks_best_candidate() {
    let m = model(3);
    let sources: Vec<Vec<u32>> = vec![vec![4, 5, 6], vec![7, 8, 9, 10, 11], vec![12]];
    let refs: Vec<&[u32]> = sources.iter().map(Vec::as_slice).collect();
    let out = mask_predict(&m, &refs, 3, 4).unwrap();
    assert_eq!(out.len(), 3);
    for t in &out {
        assert_eq!(t.candidates.len(), 4);
        let best = t
            .candidates
            .iter()
            .map(|c| c.1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(t.score, best);
        assert!(t
            .candidates
            .iter()
            .any(|c| c.0 == t.tokens.len() && c.1 == t.score));
        assert!(t.score <= 0.0);
    }
    let single = mask_predict(&m, &refs[..1], 3, 4).unwrap();
    assert_eq!(single[0], out[0]);
    assert!(mask_predict(&m, &refs, 0, 1).is_err());
    assert!(mask_predict(&m, &refs, 2, 13).is_err());
}
