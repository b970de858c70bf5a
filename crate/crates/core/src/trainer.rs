//! Joint training of weights and gates.
//!
//! The objective per minibatch is the mean cross-entropy plus
//! `λ1·Σ g(1−g) + λ2·Σ g + λ3·Σ w²`, summed over the gated layers. Gates get
//! straight-through gradients, are updated by the same momentum SGD as the
//! weights, and are projected back into `[0, 1]` after every step.

use crate::data::{self, Dataset};
use crate::gates::DrawMode;
use crate::model::{ForwardMode, Network};
use crate::regularizers::{self, PenaltyWeights, RegularizerError};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::model::ModelError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gate value assigned to weights outside the kept top-k during pre-initialization.
pub const PREINIT_OFF_VALUE: f32 = 0.49;
/// Sampled draws used for the `[S]` sparsity statistics.
pub const DEFAULT_SAMPLED_DRAWS: usize = 100;
const EVAL_BATCH: usize = 500;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Penalty(#[from] RegularizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInit {
    /// Every gate of every gated layer starts at the given value.
    Constant(f32),
    /// Gates come from the network's current weights: the top fraction by
    /// magnitude start at 1, the rest at 0.49. One fraction per layer, or a
    /// single fraction for all layers.
    Preinit(Vec<f64>),
    /// Leave the gates as they are.
    Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub draw_mode: DrawMode,
    pub gate_init: GateInit,
    /// Per-layer gating flags; `None` keeps the network's own flags.
    pub gating: Option<Vec<bool>>,
    /// Keep gates fixed (no gradient step, no penalty gradient).
    #[serde(default)]
    pub freeze_gates: bool,
    #[serde(default = "default_draws")]
    pub sampled_draws: usize,
}

fn default_draws() -> usize {
    DEFAULT_SAMPLED_DRAWS
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lr: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            draw_mode: DrawMode::Ml,
            gate_init: GateInit::Constant(crate::model::DEFAULT_GATE_INIT),
            gating: None,
            freeze_gates: false,
            sampled_draws: DEFAULT_SAMPLED_DRAWS,
        }
    }
}

impl TrainConfig {
    pub fn penalties(&self) -> PenaltyWeights {
        PenaltyWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.penalties().validate()?;
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        match &self.gate_init {
            GateInit::Constant(c) if !c.is_finite() => return bad(format!("gate init {c} is not finite")),
            GateInit::Preinit(fracs) if fracs.is_empty() || fracs.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) => {
                return bad(format!("keep fractions must lie in (0, 1], got {fracs:?}"))
            }
            _ => {}
        }
        if self.draw_mode == DrawMode::Unbiased && self.sampled_draws < 2 {
            return bad("sampled sparsity needs at least 2 draws".into());
        }
        Ok(())
    }
}

/// Loss terms of one evaluation of the objective (penalties unweighted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub bimodal: f64,
    pub gate_l1: f64,
    pub weight_l2: f64,
    pub total: f64,
}

/// Unweighted penalty sums over gated layers: `(Σ g(1−g), Σ g, Σ w²)`.
pub fn penalty_terms(net: &Network) -> (f64, f64, f64) {
    net.layers.iter().filter(|l| l.gated).fold((0.0, 0.0, 0.0), |(b, l1, l2), layer| {
        (
            b + regularizers::bimodal_penalty(&layer.gates),
            l1 + regularizers::gate_l1_penalty(&layer.gates),
            l2 + regularizers::weight_l2_penalty(&layer.weight),
        )
    })
}

fn breakdown(data: f64, net: &Network, pw: &PenaltyWeights) -> LossBreakdown {
    let (bimodal, gate_l1, weight_l2) = penalty_terms(net);
    LossBreakdown {
        data,
        bimodal,
        gate_l1,
        weight_l2,
        total: data + pw.lambda1 * bimodal + pw.lambda2 * gate_l1 + pw.lambda3 * weight_l2,
    }
}

/// Objective value on one batch.
pub fn total_loss(
    net: &Network,
    x: &Tensor<f32>,
    y: &[usize],
    pw: &PenaltyWeights,
    mode: ForwardMode,
) -> Result<LossBreakdown, TrainError> {
    let masks = net.masks(mode);
    let mut graph = Graph::<f32>::new();
    let nodes = net.forward_graph(&mut graph, x.clone(), &masks)?;
    let loss = graph.softmax_xent(nodes.logits, y)?;
    Ok(breakdown(graph.value(loss).data()[0] as f64, net, pw))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub gates: Option<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetGrads {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                    gates: (l.gated && l.gates.trainable).then(|| Tensor::zeros(l.gates.shape())),
                })
                .collect(),
        }
    }
}

fn add_scaled(target: &mut Tensor<f32>, extra: &Tensor<f32>, scale: f64) {
    if scale == 0.0 {
        return;
    }
    let s = scale as f32;
    for (t, e) in target.data_mut().iter_mut().zip(extra.data()) {
        *t += s * e;
    }
}

/// Objective and its gradient for one batch under fixed masks.
pub fn loss_and_grads(
    net: &Network,
    x: &Tensor<f32>,
    y: &[usize],
    pw: &PenaltyWeights,
    masks: &[Option<crate::gates::BinaryMask>],
) -> Result<(LossBreakdown, NetGrads), TrainError> {
    let mut graph = Graph::<f32>::new();
    let nodes = net.forward_graph(&mut graph, x.clone(), masks)?;
    let loss = graph.softmax_xent(nodes.logits, y)?;
    let data_loss = graph.value(loss).data()[0] as f64;
    let mut grads = graph.backward(loss)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (layer, ids) in net.layers.iter().zip(&nodes.layers) {
        let mut weight = grads.take(ids.weight).expect("weight is a trainable leaf");
        let bias = grads.take(ids.bias).expect("bias is a trainable leaf");
        let gates = ids.gates.map(|id| {
            let mut g = grads.take(id).expect("gate is a trainable leaf");
            add_scaled(&mut g, &regularizers::bimodal_grad(&layer.gates), pw.lambda1);
            add_scaled(&mut g, &regularizers::gate_l1_grad(&layer.gates), pw.lambda2);
            g
        });
        if layer.gated {
            add_scaled(&mut weight, &regularizers::weight_l2_grad(&layer.weight), pw.lambda3);
        }
        layers.push(LayerGrads { weight, bias, gates });
    }
    Ok((breakdown(data_loss, net, pw), NetGrads { layers }))
}

/// Momentum SGD: `v ← μv + ∇`, `θ ← θ − lr·v`; gates are then projected into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<NetGrads>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &NetGrads) {
        let velocity = self.velocity.get_or_insert_with(|| NetGrads::zeros_like(net));
        let (lr, mu) = (self.lr as f32, self.momentum as f32);
        let update = |param: &mut Tensor<f32>, v: &mut Tensor<f32>, g: &Tensor<f32>| {
            for ((p, v), g) in param.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        };
        for ((layer, v), g) in net.layers.iter_mut().zip(&mut velocity.layers).zip(&grads.layers) {
            update(&mut layer.weight, &mut v.weight, &g.weight);
            update(&mut layer.bias, &mut v.bias, &g.bias);
            if let (Some(vg), Some(gg)) = (v.gates.as_mut(), g.gates.as_ref()) {
                update(layer.gates.values_mut(), vg, gg);
                layer.gates.project();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: String,
    pub sparsity_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective over the epoch's batches.
    pub train_loss: f64,
    pub data_loss: f64,
    pub bimodal_penalty: f64,
    pub gate_l1_penalty: f64,
    pub weight_l2_penalty: f64,
    /// `Σ Var(gˢ)` over gated layers.
    pub mask_variance_sum: f64,
    pub accuracy: f64,
    pub sparsity_pct: f64,
    pub layer_sparsity: Vec<LayerSparsity>,
}

/// Mean and unbiased variance of sparsity (in percent) over sampled masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledSparsity {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub final_sparsity: f64,
    pub sampled: Option<SampledSparsity>,
}

impl RunRecord {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch record serializes") + "\n")
            .collect()
    }
}

/// SplitMix64 finalizer; derives independent seeds from one base seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;
const MEASURE_STREAM: u64 = 3;

/// Classification accuracy (percent) in eval mode.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<f64, TrainError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let masks = net.masks(ForwardMode::Eval);
    let mut correct = 0usize;
    for batch in data::sequential_batches(ds, EVAL_BATCH) {
        let logits = net.forward_with_masks(&batch.x, &masks)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&batch.y)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Index of the largest entry of each row of `logits[N×C]`.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Draws `draws` bernoulli masks for the gated layers and summarizes their sparsity.
pub fn measure_sampled_sparsity(net: &Network, draws: usize, seed: u64) -> Result<SampledSparsity, TrainError> {
    if draws < 2 {
        return Err(TrainError::Config(format!("need at least 2 draws, got {draws}")));
    }
    let total = net.gated_weight_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<f64> = (0..draws)
        .map(|_| {
            let kept: usize = net
                .masks(ForwardMode::TrainSampled(rng.gen()))
                .iter()
                .flatten()
                .map(|m| m.count_ones())
                .sum();
            crate::model::sparsity_pct(kept, total)
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / draws as f64;
    let variance = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    Ok(SampledSparsity { mean, variance })
}

/// Loads `pretrained` weights and biases into `net` and sets the gates of each
/// gated layer from weight magnitude: the top `round(f·n)` weights get gate 1,
/// the rest 0.49. Equal magnitudes are ranked by lower flat index first.
pub fn preinit_gates(net: &mut Network, pretrained: &Network, keep_fractions: &[f64]) -> Result<(), TrainError> {
    if net.spec().shapes()? != pretrained.spec().shapes()? {
        return Err(TrainError::Config("pretrained network has a different architecture".into()));
    }
    let fractions: Vec<f64> = match keep_fractions.len() {
        1 => vec![keep_fractions[0]; net.layers.len()],
        n if n == net.layers.len() => keep_fractions.to_vec(),
        n => {
            return Err(TrainError::Config(format!(
                "{n} keep fractions for {} layers",
                net.layers.len()
            )))
        }
    };
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(TrainError::Config(format!("keep fraction {f} not in (0, 1]")));
    }
    for ((layer, src), frac) in net.layers.iter_mut().zip(&pretrained.layers).zip(fractions) {
        layer.weight = src.weight.clone();
        layer.bias = src.bias.clone();
        if !layer.gated {
            continue;
        }
        let n = layer.weight.len();
        let keep = ((frac * n as f64).round() as usize).min(n);
        let w = layer.weight.data();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
        let gates = layer.gates.values_mut().data_mut();
        gates.iter_mut().for_each(|g| *g = PREINIT_OFF_VALUE);
        for &i in &order[..keep] {
            gates[i] = 1.0;
        }
    }
    Ok(())
}

fn apply_setup(net: &mut Network, cfg: &TrainConfig) -> Result<(), TrainError> {
    if let Some(flags) = &cfg.gating {
        net.set_gating(flags)?;
    }
    match &cfg.gate_init {
        GateInit::Constant(c) => net.fill_gates(*c),
        GateInit::Preinit(fracs) => {
            let pretrained = net.clone();
            preinit_gates(net, &pretrained, fracs)?;
        }
        GateInit::Keep => {}
    }
    net.freeze_gates(cfg.freeze_gates);
    Ok(())
}

fn layer_sparsity(net: &Network) -> Vec<LayerSparsity> {
    net.param_report()
        .into_iter()
        .zip(&net.layers)
        .filter(|(_, l)| l.gated)
        .map(|(r, _)| LayerSparsity {
            layer: r.name,
            sparsity_pct: r.sparsity_pct,
        })
        .collect()
}

/// Runs `cfg.epochs` of minibatch training; accuracy is measured on `eval`
/// when given, otherwise on the training set.
pub fn train(net: &mut Network, train_ds: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<RunRecord, TrainError> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    apply_setup(net, cfg)?;
    let pw = cfg.penalties();
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, MASK_STREAM));
    let eval_ds = eval.unwrap_or(train_ds);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let shuffle = derive_seed(derive_seed(cfg.seed, SHUFFLE_STREAM), epoch as u64);
        let (mut total, mut data_sum, mut seen) = (0.0, 0.0, 0usize);
        for (b, batch) in data::batches(train_ds, cfg.batch_size, shuffle).enumerate() {
            let mode = match cfg.draw_mode {
                DrawMode::Ml => ForwardMode::TrainMl,
                DrawMode::Unbiased => ForwardMode::TrainSampled(mask_rng.gen()),
            };
            let masks = net.masks(mode);
            let (loss, grads) = loss_and_grads(net, &batch.x, &batch.y, &pw, &masks)?;
            if !loss.total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    loss: loss.total,
                });
            }
            sgd.step(net, &grads);
            let n = batch.y.len();
            total += loss.total * n as f64;
            data_sum += loss.data * n as f64;
            seen += n;
        }
        let (bimodal, l1, l2) = penalty_terms(net);
        let variance_sum: f64 = net
            .layers
            .iter()
            .filter(|l| l.gated)
            .map(|l| regularizers::mask_variance(&l.gates).sum())
            .sum();
        let record = EpochRecord {
            epoch,
            train_loss: total / seen as f64,
            data_loss: data_sum / seen as f64,
            bimodal_penalty: bimodal,
            gate_l1_penalty: l1,
            weight_l2_penalty: l2,
            mask_variance_sum: variance_sum,
            accuracy: evaluate(net, eval_ds)?,
            sparsity_pct: net.gated_sparsity_pct(),
            layer_sparsity: layer_sparsity(net),
        };
        log::debug!(
            "epoch {epoch}: loss {:.4} acc {:.2}% sparsity {:.2}%",
            record.train_loss,
            record.accuracy,
            record.sparsity_pct
        );
        epochs.push(record);
    }

    let last = epochs.last().expect("at least one epoch");
    let sampled = match cfg.draw_mode {
        DrawMode::Unbiased => Some(measure_sampled_sparsity(
            net,
            cfg.sampled_draws,
            derive_seed(cfg.seed, MEASURE_STREAM),
        )?),
        DrawMode::Ml => None,
    };
    Ok(RunRecord {
        final_accuracy: last.accuracy,
        final_sparsity: last.sparsity_pct,
        epochs,
        sampled,
    })
}

/// One cell of a hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda1: f64,
    pub lambda2: f64,
    pub init: f32,
}

/// Cartesian product of the three value lists.
pub fn grid(lambda1: &[f64], lambda2: &[f64], inits: &[f32]) -> Vec<SweepPoint> {
    let mut out = Vec::new();
    for &l1 in lambda1 {
        for &l2 in lambda2 {
            for &init in inits {
                out.push(SweepPoint {
                    lambda1: l1,
                    lambda2: l2,
                    init,
                });
            }
        }
    }
    out
}

#[derive(Debug)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub mode: DrawMode,
    pub outcome: Result<RunRecord, TrainError>,
}

pub const SWEEP_CSV_HEADER: &str =
    "lambda1,lambda2,init,mode,final_accuracy,final_sparsity,sparsity_mean,sparsity_var";

/// Trains a fresh network per grid cell, every cell with the base seed.
pub fn sweep(
    points: &[SweepPoint],
    base: &TrainConfig,
    make_net: &(dyn Fn() -> Result<Network, ModelError> + Sync),
    train_ds: &Dataset,
    eval: Option<&Dataset>,
) -> Result<Vec<SweepRow>, TrainError> {
    if points.is_empty() {
        return Err(TrainError::Config("sweep grid is empty".into()));
    }
    Ok(points
        .iter()
        .map(|&point| {
            let cfg = TrainConfig {
                lambda1: point.lambda1,
                lambda2: point.lambda2,
                gate_init: GateInit::Constant(point.init),
                ..base.clone()
            };
            let outcome = make_net()
                .map_err(TrainError::from)
                .and_then(|mut net| train(&mut net, train_ds, eval, &cfg));
            if let Err(e) = &outcome {
                log::warn!("sweep cell {point:?} failed: {e}");
            }
            SweepRow {
                point,
                mode: base.draw_mode,
                outcome,
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for row in rows {
        let mode = match row.mode {
            DrawMode::Ml => "ml",
            DrawMode::Unbiased => "sampled",
        };
        let p = row.point;
        let tail = match &row.outcome {
            Ok(r) => {
                let (mean, var) = r
                    .sampled
                    .map(|s| (format!("{:.4}", s.mean), format!("{:.4}", s.variance)))
                    .unwrap_or_default();
                format!("{:.4},{:.4},{mean},{var}", r.final_accuracy, r.final_sparsity)
            }
            Err(_) => "failed,,,".to_string(),
        };
        out.push_str(&format!("{},{},{},{mode},{tail}\n", p.lambda1, p.lambda2, p.init));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    #[test]
    fn projection_after_step() {
        let mut net = Network::mlp(&[1, 1], 0).unwrap();
        net.layers[0].gates.values_mut().data_mut()[0] = 0.9;
        let mut grads = NetGrads::zeros_like(&net);
        grads.layers[0].gates.as_mut().unwrap().data_mut()[0] = -2.0;
        Sgd::new(0.1, 0.0).step(&mut net, &grads);
        assert_eq!(net.layers[0].gates.values().data()[0], 1.0);
    }

    #[test]
    fn zero_grads_leave_net_unchanged() {
        let mut net = Network::mlp(&[3, 4, 2], 1).unwrap();
        let before = net.clone();
        let grads = NetGrads::zeros_like(&net);
        let mut sgd = Sgd::new(0.5, 0.9);
        sgd.step(&mut net, &grads);
        sgd.step(&mut net, &grads);
        assert_eq!(net, before);
    }

    #[test]
    fn momentum_two_steps_match_recurrence() {
        let mut net = Network::mlp(&[1, 1], 0).unwrap();
        let w0 = net.layers[0].weight.data()[0];
        let mut sgd = Sgd::new(0.1, 0.9);
        let mut grads = NetGrads::zeros_like(&net);
        grads.layers[0].weight.data_mut()[0] = 1.0;
        sgd.step(&mut net, &grads);
        grads.layers[0].weight.data_mut()[0] = 0.5;
        sgd.step(&mut net, &grads);
        // v1 = 1, w1 = w0 - 0.1; v2 = 0.9 + 0.5 = 1.4, w2 = w1 - 0.14
        let expected = (w0 - 0.1f32 * 1.0) - 0.1f32 * (0.9f32 * 1.0 + 0.5);
        assert_eq!(net.layers[0].weight.data()[0], expected);
    }

    #[test]
    fn total_loss_penalty_arithmetic() {
        let mut net = Network::mlp(&[1, 1], 0).unwrap();
        net.fill_gates(0.5);
        let x = Tensor::new(vec![1, 1], vec![0.3]).unwrap();
        let pw = PenaltyWeights::new(2.0, 3.0, 0.0).unwrap();
        let l = total_loss(&net, &x, &[0], &pw, ForwardMode::Eval).unwrap();
        assert_eq!(l.total - l.data, 2.0);
        let plain = total_loss(&net, &x, &[0], &PenaltyWeights::default(), ForwardMode::Eval).unwrap();
        assert_eq!(plain.total, plain.data);
        net.fill_gates(1.0);
        let binary = total_loss(&net, &x, &[0], &PenaltyWeights::new(1.0, 0.0, 0.0).unwrap(), ForwardMode::Eval)
            .unwrap();
        assert_eq!(binary.total, binary.data);
    }

    #[test]
    fn sampled_sparsity_statistics() {
        let mut net = Network::mlp(&[10, 10], 0).unwrap();
        net.fill_gates(1.0);
        let s = measure_sampled_sparsity(&net, 20, 1).unwrap();
        assert_eq!((s.mean, s.variance), (0.0, 0.0));

        net.fill_gates(0.5);
        let s = measure_sampled_sparsity(&net, 1000, 7).unwrap();
        // Binomial(100, 0.5) in percent: variance 25; 3σ of the sample variance is ~3.4.
        assert!((s.variance - 25.0).abs() <= 3.4, "{s:?}");
        assert!((s.mean - 50.0).abs() <= 0.5, "{s:?}");
        assert!(measure_sampled_sparsity(&net, 1, 0).is_err());
    }

    #[test]
    fn single_gate_sampled_mean() {
        let mut net = Network::mlp(&[1, 1], 0).unwrap();
        net.fill_gates(0.5);
        let s = measure_sampled_sparsity(&net, 20_000, 3).unwrap();
        assert!((s.mean - 50.0).abs() < 1.5, "{s:?}");
    }

    #[test]
    fn preinit_keeps_top_fraction() {
        let mut pretrained = Network::mlp(&[4, 5], 0).unwrap();
        pretrained.layers[0].weight.data_mut()[..4].copy_from_slice(&[0.5, -0.5, 0.5, 0.1]);
        let mut net = Network::mlp(&[4, 5], 9).unwrap();
        preinit_gates(&mut net, &pretrained, &[0.25]).unwrap();
        let report = net.param_report();
        assert_eq!(report[0].masked_nonzeros, 5);
        assert_eq!(net.layers[0].weight, pretrained.layers[0].weight);
        let gates = net.layers[0].gates.values().data();
        assert!(gates.iter().all(|&g| g == 1.0 || g == PREINIT_OFF_VALUE));

        let mut full = Network::mlp(&[4, 5], 9).unwrap();
        preinit_gates(&mut full, &pretrained, &[1.0]).unwrap();
        assert!(full.layers[0].gates.values().data().iter().all(|&g| g == 1.0));
        assert!(preinit_gates(&mut full, &pretrained, &[0.0]).is_err());
        let other = Network::mlp(&[4, 6], 0).unwrap();
        assert!(preinit_gates(&mut full, &other, &[0.5]).is_err());
    }

    #[test]
    fn strong_l1_pressure_sparsifies() {
        let train_ds = synth_blobs(400, 8, 3, 1).unwrap();
        let mut net = Network::mlp(&[8, 16, 3], 2).unwrap();
        let cfg = TrainConfig {
            lambda2: 1.0,
            lr: 0.05,
            epochs: 3,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let record = train(&mut net, &train_ds, None, &cfg).unwrap();
        assert!(record.final_sparsity > 90.0, "{}", record.final_sparsity);
        assert!(net.layers.iter().all(|l| l.gates.in_unit_interval()));
    }

    #[test]
    fn no_penalty_objective_is_data_loss() {
        let train_ds = synth_blobs(400, 8, 3, 4).unwrap();
        let mut net = Network::mlp(&[8, 16, 3], 5).unwrap();
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 3,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let record = train(&mut net, &train_ds, None, &cfg).unwrap();
        assert!(record.epochs.iter().all(|e| e.train_loss == e.data_loss));
        assert!(record.final_accuracy > 95.0, "{}", record.final_accuracy);
    }

    #[test]
    fn same_seed_same_record() {
        let train_ds = synth_blobs(200, 6, 3, 4).unwrap();
        let cfg = TrainConfig {
            lambda1: 0.1,
            lambda2: 0.05,
            epochs: 2,
            batch_size: 16,
            draw_mode: DrawMode::Unbiased,
            seed: 17,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = Network::mlp(&[6, 8, 3], 3).unwrap();
            let r = train(&mut net, &train_ds, None, &cfg).unwrap();
            (r, net)
        };
        let (a, na) = run();
        let (b, nb) = run();
        assert_eq!(a, b);
        assert_eq!(na, nb);
        assert!(a.sampled.is_some());
    }

    #[test]
    fn divergence_is_reported() {
        let train_ds = synth_blobs(64, 4, 2, 0).unwrap();
        let mut net = Network::mlp(&[4, 2], 0).unwrap();
        net.layers[0].weight.data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut net, &train_ds, None, &cfg),
            Err(TrainError::Diverged { epoch: 0, batch: 0, .. })
        ));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { lambda2: -1.0, ..ok.clone() },
            TrainConfig { gate_init: GateInit::Preinit(vec![0.0]), ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn sweep_csv_layout() {
        let ds = synth_blobs(60, 4, 2, 0).unwrap();
        let base = TrainConfig {
            epochs: 1,
            batch_size: 20,
            draw_mode: DrawMode::Unbiased,
            sampled_draws: 5,
            ..TrainConfig::default()
        };
        let points = grid(&[0.0, 1.0], &[0.0, 1.0], &[0.6]);
        let rows = sweep(&points, &base, &|| Network::mlp(&[4, 2], 0), &ds, None).unwrap();
        let csv = sweep_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], SWEEP_CSV_HEADER);
        assert!(lines[1].starts_with("0,0,0.6,sampled,"));
        assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 8 && !l.ends_with(",,")));
        assert!(sweep(&[], &base, &|| Network::mlp(&[4, 2], 0), &ds, None).is_err());
    }
}
