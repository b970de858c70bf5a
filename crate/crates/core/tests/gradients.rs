//! Backward pass against central finite differences of an independent f64 oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsegate::gates::BinaryMask;
use sparsegate::model::{ForwardMode, Network};
use sparsegate::regularizers::PenaltyWeights;
use sparsegate::tensor::{Graph, Tensor};
use sparsegate::trainer::loss_and_grads;

const DIMS: [usize; 3] = [5, 4, 3];
const BATCH: usize = 4;
const H: f64 = 1e-6;

/// Parameters of a two-layer net in f64: effective weights and biases.
#[derive(Clone)]
struct Shadow {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

fn oracle_loss(p: &Shadow, x: &[f64], y: &[usize]) -> f64 {
    let [d0, d1, d2] = DIMS;
    let mut total = 0.0;
    for (s, &label) in y.iter().enumerate() {
        let xs = &x[s * d0..(s + 1) * d0];
        let h: Vec<f64> = (0..d1)
            .map(|j| {
                let z: f64 = (0..d0).map(|i| p.w1[j * d0 + i] * xs[i]).sum::<f64>() + p.b1[j];
                z.max(0.0)
            })
            .collect();
        let logits: Vec<f64> = (0..d2)
            .map(|k| (0..d1).map(|j| p.w2[k * d1 + j] * h[j]).sum::<f64>() + p.b2[k])
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[label];
    }
    total / y.len() as f64
}

fn central(p: &Shadow, x: &[f64], y: &[usize], pick: impl Fn(&mut Shadow) -> &mut f64) -> f64 {
    let mut up = p.clone();
    *pick(&mut up) += H;
    let mut down = p.clone();
    *pick(&mut down) -= H;
    (oracle_loss(&up, x, y) - oracle_loss(&down, x, y)) / (2.0 * H)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

struct Instance {
    net: Network,
    masks: Vec<BinaryMask>,
    x: Tensor<f32>,
    y: Vec<usize>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::mlp(&DIMS, seed).unwrap();
    for layer in &mut net.layers {
        for b in layer.bias.data_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        for g in layer.gates.values_mut().data_mut() {
            *g = rng.gen();
        }
    }
    let masks = net.ml_masks();
    let x = Tensor::from_fn(&[BATCH, DIMS[0]], |_| rng.gen_range(-2.0..2.0));
    let y = (0..BATCH).map(|_| rng.gen_range(0..DIMS[2])).collect();
    Instance { net, masks, x, y }
}

fn shadow(inst: &Instance) -> Shadow {
    let eff = |l: usize| -> Vec<f64> {
        let w = inst.net.layers[l].weight.data();
        w.iter()
            .zip(inst.masks[l].iter())
            .map(|(&w, on)| if on { w as f64 } else { 0.0 })
            .collect()
    };
    let b = |l: usize| inst.net.layers[l].bias.data().iter().map(|&v| v as f64).collect();
    Shadow {
        w1: eff(0),
        b1: b(0),
        w2: eff(1),
        b2: b(1),
    }
}

/// Oracle gradients: dL/dWs by finite differences, then the chain through the mask.
fn oracle_grads(inst: &Instance) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let p = shadow(inst);
    let x: Vec<f64> = inst.x.data().iter().map(|&v| v as f64).collect();
    let y = &inst.y;
    (0..2)
        .map(|l| {
            let n = inst.net.layers[l].weight.len();
            let d_ws: Vec<f64> = (0..n)
                .map(|i| central(&p, &x, y, |s| if l == 0 { &mut s.w1[i] } else { &mut s.w2[i] }))
                .collect();
            let nb = inst.net.layers[l].bias.len();
            let d_b: Vec<f64> = (0..nb)
                .map(|i| central(&p, &x, y, |s| if l == 0 { &mut s.b1[i] } else { &mut s.b2[i] }))
                .collect();
            let w = inst.net.layers[l].weight.data();
            let d_w = d_ws
                .iter()
                .zip(inst.masks[l].iter())
                .map(|(&d, on)| if on { d } else { 0.0 })
                .collect();
            let d_g = d_ws.iter().zip(w).map(|(&d, &w)| d * w as f64).collect();
            (d_w, d_b, d_g)
        })
        .collect()
}

fn graph_grads(inst: &Instance) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut graph = Graph::<f64>::new();
    let masks: Vec<_> = inst.masks.iter().cloned().map(Some).collect();
    let nodes = inst.net.forward_graph(&mut graph, inst.x.cast(), &masks).unwrap();
    let loss = graph.softmax_xent(nodes.logits, &inst.y).unwrap();
    let grads = graph.backward(loss).unwrap();
    nodes
        .layers
        .iter()
        .map(|l| {
            let v = |id| grads.get(id).unwrap().data().to_vec();
            (v(l.weight), v(l.bias), v(l.gates.unwrap()))
        })
        .collect()
}

#[test]
fn f64_backward_matches_finite_differences() {
    for seed in 0..50 {
        let inst = instance(seed);
        for (layer, (ours, oracle)) in graph_grads(&inst).iter().zip(oracle_grads(&inst)).enumerate() {
            for (name, a, b) in [
                ("weight", &ours.0, &oracle.0),
                ("bias", &ours.1, &oracle.1),
                ("gate", &ours.2, &oracle.2),
            ] {
                let e = rel_err(a, b);
                assert!(e <= 1e-3, "seed {seed} layer {layer} {name}: rel err {e}");
            }
        }
    }
}

#[test]
fn f32_training_gradients_track_oracle() {
    for seed in 100..120 {
        let inst = instance(seed);
        let masks: Vec<_> = inst.masks.iter().cloned().map(Some).collect();
        let (_, grads) = loss_and_grads(&inst.net, &inst.x, &inst.y, &PenaltyWeights::default(), &masks).unwrap();
        for (ours, oracle) in grads.layers.iter().zip(oracle_grads(&inst)) {
            let f = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
            assert!(rel_err(&f(&ours.weight), &oracle.0) <= 1e-3);
            assert!(rel_err(&f(&ours.bias), &oracle.1) <= 1e-3);
            assert!(rel_err(&f(ours.gates.as_ref().unwrap()), &oracle.2) <= 1e-3);
        }
    }
}

#[test]
fn masked_weights_get_zero_gradient_and_gates_get_full_signal() {
    let inst = instance(7);
    let grads = graph_grads(&inst);
    for (l, (dw, _, _)) in grads.iter().enumerate() {
        for (d, on) in dw.iter().zip(inst.masks[l].iter()) {
            if !on {
                assert_eq!(*d, 0.0);
            }
        }
    }
}

#[test]
fn penalty_gradients_add_outside_the_graph() {
    let inst = instance(3);
    let masks: Vec<_> = inst.masks.iter().cloned().map(Some).collect();
    let plain = loss_and_grads(&inst.net, &inst.x, &inst.y, &PenaltyWeights::default(), &masks).unwrap().1;
    let pw = PenaltyWeights::new(0.5, 0.25, 0.1).unwrap();
    let (loss, pen) = loss_and_grads(&inst.net, &inst.x, &inst.y, &pw, &masks).unwrap();
    assert!(loss.total > loss.data);
    for (l, layer) in inst.net.layers.iter().enumerate() {
        let g = layer.gates.values().data();
        let a = plain.layers[l].gates.as_ref().unwrap().data();
        let b = pen.layers[l].gates.as_ref().unwrap().data();
        for i in 0..g.len() {
            let expected = a[i] + (0.5 * (1.0 - 2.0 * g[i])) + 0.25;
            assert!((b[i] - expected).abs() <= 1e-6, "{} vs {}", b[i], expected);
        }
        let w = layer.weight.data();
        for i in 0..w.len() {
            let expected = plain.layers[l].weight.data()[i] + 0.1 * 2.0 * w[i];
            assert!((pen.layers[l].weight.data()[i] - expected).abs() <= 1e-6);
        }
    }
    assert_eq!(
        inst.net.forward(&inst.x, ForwardMode::Eval).unwrap(),
        inst.net.forward(&inst.x, ForwardMode::TrainMl).unwrap()
    );
}
