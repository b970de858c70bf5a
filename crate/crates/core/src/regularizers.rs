//! Gate penalties, the complexity count, and the spike-and-slab oracle.

use crate::gates::{BinaryMask, GateTensor};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magnitude at or below which a weight counts as zero for the spike term.
pub const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegularizerError {
    #[error("penalty coefficient {name} must be finite and non-negative, got {value}")]
    NegativeCoefficient { name: &'static str, value: f64 },
    #[error("invalid spike-and-slab parameters: {0}")]
    InvalidPrior(String),
    #[error("weight {value} at index {index} lies outside the support [-{bound}, {bound}]")]
    OutOfSupport { index: usize, value: f64, bound: f64 },
}

/// Coefficients of the bi-modal gate term, the gate ℓ1 term and the weight ℓ2 term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default)]
    pub lambda3: f64,
}

impl PenaltyWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self, RegularizerError> {
        let pw = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        pw.validate()?;
        Ok(pw)
    }

    pub fn validate(&self) -> Result<(), RegularizerError> {
        for (name, value) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(RegularizerError::NegativeCoefficient { name, value });
            }
        }
        Ok(())
    }
}

/// `Σ g(1−g)`.
pub fn bimodal_penalty(g: &GateTensor) -> f64 {
    g.values()
        .data()
        .iter()
        .map(|&v| {
            let v = v as f64;
            v * (1.0 - v)
        })
        .sum()
}

/// Per-entry derivative `1 − 2g` of [`bimodal_penalty`].
pub fn bimodal_grad(g: &GateTensor) -> Tensor<f32> {
    g.values().map(|v| 1.0 - 2.0 * v)
}

/// `Σ g`.
pub fn gate_l1_penalty(g: &GateTensor) -> f64 {
    g.values().sum()
}

/// Derivative of [`gate_l1_penalty`]; one everywhere.
pub fn gate_l1_grad(g: &GateTensor) -> Tensor<f32> {
    Tensor::ones(g.shape())
}

/// `Σ w²`.
pub fn weight_l2_penalty(w: &Tensor<f32>) -> f64 {
    w.data().iter().map(|&v| (v as f64) * (v as f64)).sum()
}

pub fn weight_l2_grad(w: &Tensor<f32>) -> Tensor<f32> {
    w.map(|v| 2.0 * v)
}

/// Number of surviving parameters across all layers.
pub fn complexity(masks: &[BinaryMask]) -> usize {
    masks.iter().map(BinaryMask::count_ones).sum()
}

/// Per-entry variance `g(1−g)` of a bernoulli draw of the gates.
pub fn mask_variance(g: &GateTensor) -> Tensor<f32> {
    g.values().map(|v| v * (1.0 - v))
}

/// Spike-and-slab prior parameters: mixture weight, slab scale, support bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeSlabParams {
    pub alpha: f64,
    pub sigma: f64,
    pub k_bound: f64,
}

impl Default for SpikeSlabParams {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            sigma: 1.0,
            k_bound: 10.0,
        }
    }
}

impl SpikeSlabParams {
    pub fn new(alpha: f64, sigma: f64, k_bound: f64) -> Result<Self, RegularizerError> {
        let p = Self {
            alpha,
            sigma,
            k_bound,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), RegularizerError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(RegularizerError::InvalidPrior(format!(
                "alpha {} not in [0, 1]",
                self.alpha
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(RegularizerError::InvalidPrior(format!(
                "sigma {} must be positive",
                self.sigma
            )));
        }
        if !(self.k_bound > 0.0) {
            return Err(RegularizerError::InvalidPrior(format!(
                "k_bound {} must be positive",
                self.k_bound
            )));
        }
        Ok(())
    }
}

/// Negative log of the multiplicative spike-and-slab prior, without its
/// normalizing constant: `α·#{|w| > 0} + (1−α)/(2σ²)·Σ w²`.
///
/// The count term enters with a positive sign so that density is penalized.
pub fn spike_slab_neglog(w: &[f64], p: &SpikeSlabParams) -> Result<f64, RegularizerError> {
    p.validate()?;
    let mut count = 0usize;
    let mut sq = 0.0;
    for (index, &value) in w.iter().enumerate() {
        if !(value.abs() <= p.k_bound) {
            return Err(RegularizerError::OutOfSupport {
                index,
                value,
                bound: p.k_bound,
            });
        }
        if value.abs() > ZERO_TOL {
            count += 1;
        }
        sq += value * value;
    }
    Ok(p.alpha * count as f64 + (1.0 - p.alpha) / (2.0 * p.sigma * p.sigma) * sq)
}
