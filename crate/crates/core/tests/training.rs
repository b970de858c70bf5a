//! Trainer properties: pre-initialization oracle, frozen-gate equivalence, penalty trends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsegate::data::synth_blobs;
use sparsegate::gates::DrawMode;
use sparsegate::model::{ForwardMode, Network};
use sparsegate::tensor::Tensor;
use sparsegate::trainer::{preinit_gates, train, GateInit, TrainConfig, PREINIT_OFF_VALUE};

/// Keep decision by explicit rank counting: entry `i` survives when fewer than
/// `keep` entries beat it on magnitude, with earlier indices winning ties.
fn rank_oracle(w: &[f32], keep: usize) -> Vec<bool> {
    (0..w.len())
        .map(|i| {
            let beaten_by = (0..w.len())
                .filter(|&j| w[j].abs() > w[i].abs() || (w[j].abs() == w[i].abs() && j < i))
                .count();
            beaten_by < keep
        })
        .collect()
}

#[test]
fn preinit_matches_rank_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pretrained = Network::mlp(&[10, 8, 5], 2).unwrap();
    // Force ties, including at the cutoff.
    for layer in &mut pretrained.layers {
        for w in layer.weight.data_mut() {
            *w = [-0.5f32, 0.5, 0.25, -0.125, 0.0][rng.gen_range(0..5)];
        }
    }
    let fractions = [0.25, 0.4];
    let mut net = Network::mlp(&[10, 8, 5], 99).unwrap();
    preinit_gates(&mut net, &pretrained, &fractions).unwrap();

    let mut oracle_net = pretrained.clone();
    oracle_net.set_gating(&[false, false]).unwrap();
    for ((layer, src), f) in net.layers.iter().zip(&mut oracle_net.layers).zip(fractions) {
        let n = layer.weight.len();
        let keep = (f * n as f64).round() as usize;
        let expected = rank_oracle(src.weight.data(), keep);
        let gates = layer.gates.values().data();
        for (i, &on) in expected.iter().enumerate() {
            assert_eq!(gates[i], if on { 1.0 } else { PREINIT_OFF_VALUE });
        }
        let report_pct = 100.0 * (1.0 - keep as f64 / n as f64);
        assert_eq!(report_pct, (1.0 - f) * 100.0);
        for (w, on) in src.weight.data_mut().iter_mut().zip(expected) {
            if !on {
                *w = 0.0;
            }
        }
    }
    let reports = net.param_report();
    assert_eq!(reports[0].sparsity_pct, 75.0);
    assert_eq!(reports[1].sparsity_pct, 60.0);

    let x = Tensor::from_fn(&[6, 10], |_| rng.gen_range(-1.0..1.0));
    let masked = net.forward(&x, ForwardMode::Eval).unwrap();
    let pruned = oracle_net.forward(&x, ForwardMode::Eval).unwrap();
    assert_eq!(masked.data(), pruned.data());
}

#[test]
fn preinit_at_five_percent_keep() {
    let pretrained = Network::mlp(&[100, 40, 10], 1).unwrap();
    let mut net = pretrained.clone();
    preinit_gates(&mut net, &pretrained, &[0.05]).unwrap();
    assert_eq!(net.param_report()[0].sparsity_pct, 95.0);
    assert_eq!(net.param_report()[1].sparsity_pct, 95.0);
}

#[test]
fn frozen_open_gates_reproduce_ungated_training() {
    let data = synth_blobs(240, 6, 3, 2).unwrap();
    let base = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr: 0.05,
        seed: 21,
        ..TrainConfig::default()
    };
    for mode in [DrawMode::Ml, DrawMode::Unbiased] {
        let gated_cfg = TrainConfig {
            gate_init: GateInit::Constant(1.0),
            freeze_gates: true,
            draw_mode: mode,
            ..base.clone()
        };
        let plain_cfg = TrainConfig {
            gating: Some(vec![false, false]),
            gate_init: GateInit::Keep,
            ..base.clone()
        };
        let mut gated = Network::mlp(&[6, 8, 3], 5).unwrap();
        let mut plain = Network::mlp(&[6, 8, 3], 5).unwrap();
        let a = train(&mut gated, &data, None, &gated_cfg).unwrap();
        let b = train(&mut plain, &data, None, &plain_cfg).unwrap();
        for (la, lb) in gated.layers.iter().zip(&plain.layers) {
            assert_eq!(la.weight, lb.weight);
            assert_eq!(la.bias, lb.bias);
        }
        let losses = |r: &sparsegate::trainer::RunRecord| r.epochs.iter().map(|e| e.data_loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
    }
}

#[test]
fn mask_variance_tracks_bimodal_penalty() {
    let data = synth_blobs(200, 5, 2, 3).unwrap();
    let cfg = TrainConfig {
        lambda1: 0.01,
        lambda2: 0.02,
        epochs: 4,
        batch_size: 20,
        draw_mode: DrawMode::Unbiased,
        ..TrainConfig::default()
    };
    let mut net = Network::mlp(&[5, 6, 2], 0).unwrap();
    let record = train(&mut net, &data, None, &cfg).unwrap();
    for e in &record.epochs {
        assert!((e.mask_variance_sum - e.bimodal_penalty).abs() <= 1e-4, "{e:?}");
        assert!((0.0..=100.0).contains(&e.sparsity_pct));
    }
    let s = record.sampled.unwrap();
    assert!(s.variance >= 0.0);
}

fn final_sparsity(lambda1: f64, lambda2: f64, seed: u64) -> f64 {
    let data = synth_blobs(300, 8, 3, 7).unwrap();
    let cfg = TrainConfig {
        lambda1,
        lambda2,
        lr: 0.02,
        epochs: 6,
        batch_size: 30,
        seed,
        gating: Some(vec![false, true]),
        ..TrainConfig::default()
    };
    let mut net = Network::mlp(&[8, 16, 3], seed).unwrap();
    train(&mut net, &data, None, &cfg).unwrap().final_sparsity
}

#[test]
fn sparsity_rises_with_gate_l1_weight() {
    let levels: Vec<f64> = [0.0, 0.01, 0.1, 1.0].iter().map(|&l2| final_sparsity(0.0, l2, 3)).collect();
    assert!(levels.windows(2).all(|w| w[0] <= w[1]), "{levels:?}");
    assert!(levels[3] > levels[0], "{levels:?}");
}

fn std_dev(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

#[test]
fn bimodal_term_stabilizes_sparsity_across_seeds() {
    let without: Vec<f64> = (0..5).map(|s| final_sparsity(0.0, 0.05, s)).collect();
    let with: Vec<f64> = (0..5).map(|s| final_sparsity(0.03, 0.05, s)).collect();
    assert!(std_dev(&with) <= std_dev(&without), "{with:?} vs {without:?}");
}
