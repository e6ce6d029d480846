mod common;

use common::*;
use multiformer::config::preset;
use multiformer::model::{sinusoidal_positions, subsampled_len, Multiformer, Seq2SeqBatch, BOS, EOS};
use multiformer::par::Execution;
use multiformer::tensor::{Graph, ParamStore, Tensor};
use multiformer::training::{gen_synthetic_batch, SyntheticTaskSpec};
use rand::Rng;

fn task() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        symbols: 4,
        min_len: 2,
        max_len: 6,
        redundancy: 3,
        feature_dim: 3,
        noise: 0.2,
        code_seed: 5,
    }
}

fn tiny_model(name: &str, seed: u64) -> Multiformer<f64> {
    let cfg = preset(name).unwrap().tiny().to_model_config().unwrap();
    Multiformer::new(cfg, seed).unwrap()
}

#[test]
fn subsampled_length_halves_twice() {
    for t in 1..200 {
        let once = (t + 2 * 2 - 5) / 2 + 1;
        let twice = (once + 2 * 2 - 5) / 2 + 1;
        assert_eq!(subsampled_len(t), twice, "t={t}");
    }
}

#[test]
fn positions_follow_sin_cos_table() {
    let p = to_mat(&sinusoidal_positions::<f64>(50, 8));
    for (pos, row) in p.iter().enumerate() {
        for i in 0..4 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / 8.0);
            assert!((row[2 * i] - angle.sin()).abs() < 1e-15);
            assert!((row[2 * i + 1] - angle.cos()).abs() < 1e-15);
        }
    }
}

#[test]
fn padding_does_not_leak_into_encoder_states() {
    for name in ["baseline", "local_attention", "conv_attention", "multiformer_lc", "multiformer_v1", "multiformer_v2"] {
        let model = tiny_model(name, 3);
        let mut r = rng(8);
        let examples: Vec<(Tensor<f64>, Vec<usize>)> = [9, 30, 17]
            .iter()
            .map(|&t| (from_mat(&rand_mat(&mut r, t, 3)), vec![BOS, 4, 5, EOS]))
            .collect();
        let batch = Seq2SeqBatch::from_examples(&examples).unwrap();
        let (states, _) = model.encode(&batch, false, Execution::Sequential).unwrap();
        let (tp, d) = (states.shape()[1], states.shape()[2]);
        for (b, ex) in examples.iter().enumerate() {
            let alone = Seq2SeqBatch::from_examples(std::slice::from_ref(ex)).unwrap();
            let (single, _) = model.encode(&alone, false, Execution::Sequential).unwrap();
            let valid = subsampled_len(ex.0.rows());
            let padded = &states.data()[b * tp * d..b * tp * d + valid * d];
            let diff = padded.iter().zip(single.data()).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "{name} example {b}: {diff}");
        }
    }
}

#[test]
fn batch_loss_is_token_weighted_sum_of_examples() {
    let model = tiny_model("multiformer_lc", 4);
    let batch = gen_synthetic_batch::<f64>(&task(), 4, &mut rng(2)).unwrap();
    let whole = model.forward_loss(&batch, 0.1, Execution::Sequential).unwrap();
    let mut sum = 0.0;
    let mut correct = 0;
    for b in 0..batch.len() {
        let ex = batch.example(b);
        let one = Seq2SeqBatch::from_examples(&[(ex.features, ex.tokens)]).unwrap();
        let s = model.forward_loss(&one, 0.1, Execution::Sequential).unwrap();
        sum += s.loss * s.tokens as f64;
        correct += s.correct;
    }
    assert!((whole.loss * whole.tokens as f64 - sum).abs() < 1e-10);
    assert_eq!(whole.correct, correct);
    assert_eq!(whole.tokens, batch.target_positions());
}

#[test]
fn parallel_and_sequential_gradients_are_identical() {
    let model = tiny_model("multiformer_v2", 6).cast::<f32>();
    let batch = gen_synthetic_batch::<f32>(&task(), 5, &mut rng(3)).unwrap();
    let (s1, g1) = model.loss_and_gradients(&batch, 0.1, Execution::Sequential, Some(1)).unwrap();
    let (s2, g2) = model.loss_and_gradients(&batch, 0.1, Execution::Parallel, Some(1)).unwrap();
    assert_eq!(s1.loss.to_bits(), s2.loss.to_bits());
    for (a, b) in g1.iter().zip(&g2) {
        for ((ia, ga), (ib, gb)) in a.iter().zip(b.iter()) {
            assert_eq!(ia, ib);
            assert_eq!(ga, gb);
        }
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = tiny_model("multiformer_v1", 11);
    let b = tiny_model("multiformer_v1", 11);
    let c = tiny_model("multiformer_v1", 12);
    let values = |m: &Multiformer<f64>| m.params().iter().flat_map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
}

#[test]
fn loss_matches_handwritten_cross_entropy() {
    let mut r = rng(30);
    for eps in [0.0, 0.1, 0.3] {
        let (u, v) = (5, 7);
        let logits = rand_mat(&mut r, u, v);
        let targets: Vec<usize> = (0..u).map(|_| r.random_range(0..v)).collect();
        let include: Vec<bool> = (0..u).map(|i| i != 2).collect();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let lv = g.constant(from_mat(&logits));
        let loss = g.smoothed_cross_entropy(lv, &targets, &include, eps, 3.0).unwrap();
        let expected: f64 =
            (0..u).filter(|i| include[*i]).map(|i| smoothed_ce(&logits[i], targets[i], eps)).sum::<f64>() / 3.0;
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
    }
}

#[test]
fn wrong_feature_width_is_rejected() {
    let model = tiny_model("baseline", 0);
    let batch = Seq2SeqBatch::from_examples(&[(Tensor::<f64>::zeros(&[8, 5]), vec![BOS, 3, EOS])]).unwrap();
    assert!(model.forward_loss(&batch, 0.1, Execution::Sequential).is_err());
    let empty = Seq2SeqBatch::from_examples(&[(Tensor::<f64>::zeros(&[8, 3]), vec![BOS])]).unwrap();
    assert!(model.forward_loss(&empty, 0.1, Execution::Sequential).is_err());
}
