//! Gate variables and their binary realizations.
//!
//! Each weight carries a real-valued gate `g`, read as a bernoulli parameter.
//! A forward pass realizes the gates as a binary mask, either by thresholding
//! at 0.5 (the maximum-likelihood draw) or by sampling, and multiplies the
//! mask into the weights. Gradients reach `g` through the straight-through
//! rule: the realization step is treated as the identity.

use crate::tensor::{Element, Graph, NodeId, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Threshold at or above which the maximum-likelihood draw turns a gate on.
pub const ML_THRESHOLD: f32 = 0.5;

/// Piecewise-linear squashing into `[0, 1]`.
pub fn clip<T: Element>(x: T) -> T {
    if x >= T::one() {
        T::one()
    } else if x <= T::zero() {
        T::zero()
    } else {
        x
    }
}

/// How a gate tensor is realized as a binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMode {
    /// Threshold `clip(g)` at 0.5.
    Ml,
    /// Independent bernoulli draw with probability `clip(g)`.
    Unbiased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateTensor {
    values: Tensor<f32>,
    pub trainable: bool,
}

impl GateTensor {
    pub fn constant(shape: &[usize], init: f32) -> Self {
        Self {
            values: Tensor::full(shape, init),
            trainable: true,
        }
    }

    pub fn from_tensor(values: Tensor<f32>) -> Self {
        Self {
            values,
            trainable: true,
        }
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.values
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn fill(&mut self, value: f32) {
        self.values.data_mut().iter_mut().for_each(|g| *g = value);
    }

    /// Projects every entry into `[0, 1]`.
    pub fn project(&mut self) {
        self.values.data_mut().iter_mut().for_each(|g| *g = clip(*g));
    }

    pub fn in_unit_interval(&self) -> bool {
        self.values.data().iter().all(|g| (0.0..=1.0).contains(g))
    }
}

/// A realized `{0,1}` gate pattern; its ones form the layer's index set.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    bits: Tensor<f32>,
    mode: DrawMode,
    seed: Option<u64>,
}

impl BinaryMask {
    pub fn ones(shape: &[usize]) -> Self {
        Self {
            bits: Tensor::ones(shape),
            mode: DrawMode::Ml,
            seed: None,
        }
    }

    pub fn from_bits(shape: &[usize], bits: Vec<bool>) -> Result<Self, TensorError> {
        let data = bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            bits: Tensor::new(shape.to_vec(), data)?,
            mode: DrawMode::Ml,
            seed: None,
        })
    }

    pub fn as_tensor(&self) -> &Tensor<f32> {
        &self.bits
    }

    pub fn shape(&self) -> &[usize] {
        self.bits.shape()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn mode(&self) -> DrawMode {
        self.mode
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn is_on(&self, index: usize) -> bool {
        self.bits.data()[index] == 1.0
    }

    pub fn count_ones(&self) -> usize {
        self.bits.data().iter().filter(|&&b| b == 1.0).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.bits.data().iter().map(|&b| b == 1.0)
    }

    /// Reinterprets the mask as gate values.
    pub fn to_gates(&self) -> GateTensor {
        GateTensor::from_tensor(self.bits.clone())
    }
}

pub fn draw_ml(g: &GateTensor) -> BinaryMask {
    let bits = g
        .values
        .map(|v| if clip(v) >= ML_THRESHOLD { 1.0 } else { 0.0 });
    BinaryMask {
        bits,
        mode: DrawMode::Ml,
        seed: None,
    }
}

/// Bernoulli draw of every gate, reproducible from `seed`.
pub fn draw_unbiased(g: &GateTensor, seed: u64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = g.values.map(|v| {
        let u: f32 = rng.gen();
        if u < clip(v) {
            1.0
        } else {
            0.0
        }
    });
    BinaryMask {
        bits,
        mode: DrawMode::Unbiased,
        seed: Some(seed),
    }
}

pub fn draw(g: &GateTensor, mode: DrawMode, seed: u64) -> BinaryMask {
    match mode {
        DrawMode::Ml => draw_ml(g),
        DrawMode::Unbiased => draw_unbiased(g, seed),
    }
}

/// `W ⊙ mask` outside of any graph.
pub fn apply_mask(w: &Tensor<f32>, mask: &BinaryMask) -> Result<Tensor<f32>, TensorError> {
    if w.shape() != mask.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "apply_mask",
            left: w.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    let data = w
        .data()
        .iter()
        .zip(mask.bits.data())
        .map(|(w, m)| w * m)
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Gradient w.r.t. the raw gate given the gradient w.r.t. its realization.
pub fn ste_backward<T: Element>(upstream: &Tensor<T>) -> Tensor<T> {
    upstream.clone()
}

/// Records `W ⊙ gˢ` on a graph. The weight receives `mask ⊙ upstream`; the
/// gate node receives `W ⊙ upstream` through the straight-through rule.
pub fn gated_weight<T: Element>(
    graph: &mut Graph<T>,
    weight: NodeId,
    gate: NodeId,
    mask: &BinaryMask,
) -> Result<NodeId, TensorError> {
    let realized = graph.straight_through(gate, mask.bits.cast())?;
    graph.mul(weight, realized)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gates(values: &[f32]) -> GateTensor {
        GateTensor::from_tensor(Tensor::new(vec![values.len()], values.to_vec()).unwrap())
    }

    #[test]
    fn clip_cases() {
        assert_eq!(clip(1.5f32), 1.0);
        assert_eq!(clip(-0.3f32), 0.0);
        assert_eq!(clip(0.42f32), 0.42);
        assert_eq!(clip(1.0f32), 1.0);
        assert_eq!(clip(0.0f32), 0.0);
    }

    #[test]
    fn ml_threshold_and_tie() {
        let m = draw_ml(&gates(&[0.49, 1.0, 0.5, -2.0, 3.0]));
        assert_eq!(m.as_tensor().data(), &[0.0, 1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn unbiased_degenerate_cases() {
        for seed in [0, 1, 99] {
            assert_eq!(draw_unbiased(&gates(&[0.0; 64]), seed).count_ones(), 0);
            assert_eq!(draw_unbiased(&gates(&[1.0; 64]), seed).count_ones(), 64);
        }
    }

    #[test]
    fn unbiased_mean_concentrates() {
        let g = GateTensor::constant(&[10_000], 0.7);
        let mean = draw_unbiased(&g, 42).count_ones() as f64 / 10_000.0;
        // 4σ of a binomial(10000, 0.7) proportion is 0.0183.
        assert!((mean - 0.7).abs() <= 0.02, "{mean}");
    }

    #[test]
    fn unbiased_is_reproducible() {
        let g = GateTensor::constant(&[500], 0.3);
        assert_eq!(draw_unbiased(&g, 5), draw_unbiased(&g, 5));
        assert_ne!(draw_unbiased(&g, 5), draw_unbiased(&g, 6));
    }

    #[test]
    fn apply_mask_cases() {
        let w = Tensor::new(vec![2, 2], vec![2.0, -3.0, 4.0, 5.0]).unwrap();
        let m = BinaryMask::from_bits(&[2, 2], vec![true, false, false, true]).unwrap();
        assert_eq!(apply_mask(&w, &m).unwrap().data(), &[2.0, 0.0, 0.0, 5.0]);
        assert_eq!(apply_mask(&w, &BinaryMask::ones(&[2, 2])).unwrap(), w);
        let zeros = BinaryMask::from_bits(&[2, 2], vec![false; 4]).unwrap();
        assert!(apply_mask(&w, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(apply_mask(&w, &BinaryMask::ones(&[4])).is_err());
    }

    #[test]
    fn ste_is_identity() {
        let t = Tensor::<f32>::from_fn(&[3], |i| i as f32 - 1.3);
        assert_eq!(ste_backward(&t), t);
        assert_eq!(ste_backward(&Tensor::<f32>::zeros(&[2])), Tensor::zeros(&[2]));
    }

    #[test]
    fn scalar_network_gate_gradient_is_w_times_x() {
        // loss = w · gˢ · x, so dloss/dg = w · x whatever g is.
        for (g0, w0, x0) in [(0.2, 1.5, -2.0), (0.7, -0.5, 3.0), (0.5, 2.0, 0.25)] {
            let gate = gates(&[g0]);
            let mask = draw_ml(&gate);
            let mut graph = Graph::<f64>::new();
            let w = graph.param(Tensor::scalar(w0));
            let g = graph.param(gate.values().cast());
            let ws = gated_weight(&mut graph, w, g, &mask).unwrap();
            let x = graph.constant(Tensor::scalar(x0));
            let y = graph.mul(ws, x).unwrap();
            let loss = graph.sum(y);
            let grads = graph.backward(loss).unwrap();
            assert_eq!(grads.get(g).unwrap().data()[0], w0 * x0);
            let m = if g0 >= 0.5 { 1.0 } else { 0.0 };
            assert_eq!(grads.get(w).unwrap().data()[0], m * x0);
        }
    }
}
