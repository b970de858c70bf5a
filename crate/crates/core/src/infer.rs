//! Forward evaluation of pruned models and dense-vs-CSR timing.

use crate::model::Activation;
use crate::sparsify::{CsrMatrix, LayerPayload, SparseModel};
use crate::tensor::{self, kernels, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::hint::black_box;
use std::time::Instant;
use thiserror::Error;

/// Largest allowed gap between dense and CSR benchmark outputs.
pub const BENCH_TOLERANCE: f64 = 1e-4;
pub const MIN_REPETITIONS: usize = 10;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("benchmark outputs differ by {max_diff} at {sparsity_pct}% sparsity")]
    OutputMismatch { sparsity_pct: f64, max_diff: f64 },
    #[error("invalid benchmark setup: {0}")]
    Config(String),
}

/// `y = A·x`, touching only the stored entries; accumulates in `f64`.
pub fn csr_matvec(a: &CsrMatrix, x: &[f32]) -> Result<Vec<f32>, InferError> {
    if x.len() != a.cols() {
        return Err(InferError::Dimension(format!(
            "vector of length {} for a {}×{} matrix",
            x.len(),
            a.rows(),
            a.cols()
        )));
    }
    Ok((0..a.rows())
        .map(|r| {
            let (cols, vals) = a.row(r);
            cols.iter()
                .zip(vals)
                .map(|(&c, &v)| v as f64 * x[c as usize] as f64)
                .sum::<f64>() as f32
        })
        .collect())
}

/// `Y[m×p] = A·X[n×p]`, row-major, with `f32` accumulation in row order.
pub fn csr_matmul(a: &CsrMatrix, x: &[f32], p: usize) -> Result<Vec<f32>, InferError> {
    if x.len() != a.cols() * p {
        return Err(InferError::Dimension(format!(
            "{} inputs for {} columns × batch {p}",
            x.len(),
            a.cols()
        )));
    }
    let mut y = vec![0.0f32; a.rows() * p];
    for (r, out) in y.chunks_mut(p).enumerate() {
        let (cols, vals) = a.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            let xr = &x[c as usize * p..(c as usize + 1) * p];
            for (o, &xv) in out.iter_mut().zip(xr) {
                *o += v * xv;
            }
        }
    }
    Ok(y)
}

/// Plain-loop dense counterpart of [`csr_matmul`]; `a` is `m×n` row-major.
pub fn dense_matmul(a: &[f32], m: usize, n: usize, x: &[f32], p: usize) -> Result<Vec<f32>, InferError> {
    if a.len() != m * n || x.len() != n * p {
        return Err(InferError::Dimension(format!(
            "{}-entry matrix as {m}×{n} with {}-entry input for batch {p}",
            a.len(),
            x.len()
        )));
    }
    let mut y = vec![0.0f32; m * p];
    for (row, out) in a.chunks(n).zip(y.chunks_mut(p)) {
        for (j, &v) in row.iter().enumerate() {
            let xr = &x[j * p..(j + 1) * p];
            for (o, &xv) in out.iter_mut().zip(xr) {
                *o += v * xv;
            }
        }
    }
    Ok(y)
}

/// Logits of a pruned model. Dense layers use CSR; conv layers use the masked kernel.
pub fn infer(model: &SparseModel, x: &Tensor<f32>) -> Result<Tensor<f32>, InferError> {
    let mut h = crate::model::conform_input(x.clone(), &model.spec.input).map_err(|_| {
        InferError::Dimension(format!(
            "input shape {:?} does not match model input {:?}",
            x.shape(),
            model.spec.input
        ))
    })?;
    let batch = h.shape()[0];
    for layer in &model.layers {
        h = match &layer.payload {
            LayerPayload::Dense(csr) => {
                let flat = h.len() / batch;
                let mut out = Vec::with_capacity(batch * csr.rows());
                for sample in h.data().chunks(flat) {
                    out.extend(csr_matvec(csr, sample)?);
                }
                let mut t = Tensor::new(vec![batch, csr.rows()], out).expect("batch × rows outputs");
                for row in t.data_mut().chunks_mut(layer.bias.len()) {
                    for (v, b) in row.iter_mut().zip(&layer.bias) {
                        *v += b;
                    }
                }
                t
            }
            LayerPayload::Conv { shape, kernel, .. } => {
                let k = Tensor::new(shape.to_vec(), kernel.clone()).expect("kernel matches shape");
                let mut t = tensor::conv2d(&h, &k).map_err(|e| InferError::Dimension(e.to_string()))?;
                let plane = t.shape()[2] * t.shape()[3];
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v += layer.bias[(i / plane) % layer.bias.len()];
                }
                t
            }
        };
        if layer.activation == Activation::Relu {
            h = h.map(|v| v.max(0.0));
        }
        if let LayerPayload::Conv { pool: true, .. } = layer.payload {
            let s = h.shape();
            let (out, _, out_shape) = kernels::maxpool2_forward([s[0], s[1], s[2], s[3]], h.data());
            h = Tensor::new(out_shape.to_vec(), out).expect("pool output matches shape");
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub sparsity_pct: f64,
    pub dense_ms: f64,
    pub sparse_ms: f64,
    pub speedup: f64,
    pub checksum: f64,
}

pub const BENCH_CSV_HEADER: &str = "m,n,p,sparsity,dense_ms,sparse_ms,speedup";

pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.3}\n",
            r.m, r.n, r.p, r.sparsity_pct, r.dense_ms, r.sparse_ms, r.speedup
        ));
    }
    out
}

/// `m×n` matrix with exactly `round((1 − s/100)·m·n)` non-zero entries in `[-1, 1]`.
pub fn random_sparse_matrix(m: usize, n: usize, sparsity_pct: f64, rng: &mut impl Rng) -> Vec<f32> {
    let total = m * n;
    let keep = ((1.0 - sparsity_pct / 100.0) * total as f64).round() as usize;
    let mut positions: Vec<usize> = (0..total).collect();
    positions.shuffle(rng);
    let mut a = vec![0.0f32; total];
    for &i in &positions[..keep.min(total)] {
        let mut v = 0.0;
        while v == 0.0 {
            v = rng.gen_range(-1.0f32..=1.0);
        }
        a[i] = v;
    }
    a
}

fn median_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    if times.len().is_multiple_of(2) {
        (times[mid - 1] + times[mid]) / 2.0
    } else {
        times[mid]
    }
}

/// Times the dense and CSR products on identical data for each sparsity level.
/// Outputs are compared before any timing is reported.
pub fn bench(
    m: usize,
    n: usize,
    p: usize,
    sparsities_pct: &[f64],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<BenchResult>, InferError> {
    if repetitions < MIN_REPETITIONS {
        return Err(InferError::Config(format!(
            "need at least {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    if m == 0 || n == 0 || p == 0 {
        return Err(InferError::Config(format!("dimensions {m}×{n}, batch {p} must be positive")));
    }
    if let Some(s) = sparsities_pct.iter().find(|s| !(0.0..=100.0).contains(*s)) {
        return Err(InferError::Config(format!("sparsity {s}% outside [0, 100]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(sparsities_pct.len());
    for &sparsity_pct in sparsities_pct {
        let a = random_sparse_matrix(m, n, sparsity_pct, &mut rng);
        let x: Vec<f32> = (0..n * p).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        let csr = CsrMatrix::from_dense(m, n, &a).map_err(|e| InferError::Config(e.to_string()))?;
        let dense_out = dense_matmul(&a, m, n, &x, p)?;
        let sparse_out = csr_matmul(&csr, &x, p)?;
        let max_diff = dense_out
            .iter()
            .zip(&sparse_out)
            .map(|(d, s)| (*d as f64 - *s as f64).abs())
            .fold(0.0, f64::max);
        if max_diff > BENCH_TOLERANCE {
            return Err(InferError::OutputMismatch { sparsity_pct, max_diff });
        }
        let dense_ms = median_ms(repetitions, || {
            black_box(dense_matmul(black_box(&a), m, n, black_box(&x), p).expect("checked dims"));
        });
        let sparse_ms = median_ms(repetitions, || {
            black_box(csr_matmul(black_box(&csr), black_box(&x), p).expect("checked dims"));
        });
        results.push(BenchResult {
            m,
            n,
            p,
            sparsity_pct,
            dense_ms,
            sparse_ms,
            speedup: dense_ms / sparse_ms.max(f64::MIN_POSITIVE),
            checksum: sparse_out.iter().map(|&v| v as f64).sum(),
        });
    }
    Ok(results)
}
