//! Pruning a gated network into an explicit sparse model, compression
//! metrics, and the SPNN file format.
//!
//! SPNN layout, little-endian: `b"SPNN"`, `u16` version, `u32` manifest
//! length, JSON manifest, then one binary section per layer. A dense layer
//! section is `row_ptr` (`u64`, rows+1), `col_idx` (`u32`, nnz), `values`
//! (`f32`, nnz), biases (`f32`). A conv layer section is the masked kernel
//! (`f32`, dense), the gate bitmask packed 8 per byte row-major with the
//! first gate in the least significant bit, then biases (`f32`).

use crate::binio::{self, ByteReader, ShortRead};
use crate::model::{Activation, LayerKind, ModelError, Network, NetworkSpec};
use crate::regularizers::PenaltyWeights;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SPNN";
const VERSION: u16 = 1;
/// Magic, version and manifest length.
pub const HEADER_BYTES: usize = 4 + 2 + 4;

#[derive(Debug, Error)]
pub enum SparsifyError {
    #[error("SPNN I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an SPNN file (bad magic)")]
    BadMagic,
    #[error("unsupported SPNN version {0}")]
    Version(u16),
    #[error("SPNN file truncated at byte {offset} (needed {needed} more)")]
    Truncated { offset: usize, needed: usize },
    #[error("CSR invariant violated: {0}")]
    CsrInvariant(String),
    #[error("conv payload invalid: {0}")]
    ConvPayload(String),
    #[error("SPNN manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<ShortRead> for SparsifyError {
    fn from(s: ShortRead) -> Self {
        SparsifyError::Truncated {
            offset: s.offset,
            needed: s.needed,
        }
    }
}

impl From<serde_json::Error> for SparsifyError {
    fn from(e: serde_json::Error) -> Self {
        SparsifyError::Manifest(e.to_string())
    }
}

/// Compressed sparse rows with `u64` row pointers and `u32` column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<u64>,
    col_idx: Vec<u32>,
    values: Vec<f32>,
}

impl CsrMatrix {
    /// Keeps every entry that is not exactly zero.
    pub fn from_dense(rows: usize, cols: usize, dense: &[f32]) -> Result<Self, SparsifyError> {
        if rows == 0 || cols == 0 || dense.len() != rows * cols || cols > u32::MAX as usize {
            return Err(SparsifyError::CsrInvariant(format!(
                "{} values for a {rows}×{cols} matrix",
                dense.len()
            )));
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let (mut col_idx, mut values) = (Vec::new(), Vec::new());
        row_ptr.push(0);
        for row in dense.chunks(cols) {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(j as u32);
                    values.push(v);
                }
            }
            row_ptr.push(values.len() as u64);
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds a matrix from raw arrays, checking every invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        row_ptr: Vec<u64>,
        col_idx: Vec<u32>,
        values: Vec<f32>,
    ) -> Result<Self, SparsifyError> {
        let fail = |msg: String| Err(SparsifyError::CsrInvariant(msg));
        if rows == 0 || cols == 0 {
            return fail(format!("dimensions {rows}×{cols} must be positive"));
        }
        if row_ptr.len() != rows + 1 {
            return fail(format!("row_ptr has {} entries, expected {}", row_ptr.len(), rows + 1));
        }
        if row_ptr[0] != 0 {
            return fail(format!("row_ptr[0] = {}", row_ptr[0]));
        }
        if col_idx.len() != values.len() || row_ptr[rows] != values.len() as u64 {
            return fail(format!(
                "row_ptr ends at {} with {} indices and {} values",
                row_ptr[rows],
                col_idx.len(),
                values.len()
            ));
        }
        if let Some(r) = row_ptr.windows(2).position(|w| w[1] < w[0]) {
            return fail(format!("row_ptr decreases at row {r}"));
        }
        for (r, w) in row_ptr.windows(2).enumerate() {
            let cols_in_row = &col_idx[w[0] as usize..w[1] as usize];
            if let Some(&c) = cols_in_row.iter().find(|&&c| c as usize >= cols) {
                return fail(format!("column {c} out of range in row {r}"));
            }
            if cols_in_row.windows(2).any(|p| p[1] <= p[0]) {
                return fail(format!("columns not strictly increasing in row {r}"));
            }
        }
        if let Some(i) = values.iter().position(|&v| v == 0.0) {
            return fail(format!("stored value {i} is exactly zero"));
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[u64] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[r * self.cols + c as usize] = v;
            }
        }
        out
    }

    fn payload_bytes(&self) -> usize {
        8 * (self.rows + 1) + 4 * self.nnz() + 4 * self.nnz()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerPayload {
    Dense(CsrMatrix),
    /// Kernel `[out, in, kh, kw]` with masked entries zeroed, plus the packed gate bitmask.
    Conv {
        shape: [usize; 4],
        kernel: Vec<f32>,
        mask: Vec<u8>,
        pool: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseLayer {
    pub name: String,
    pub activation: Activation,
    pub payload: LayerPayload,
    pub bias: Vec<f32>,
}

impl SparseLayer {
    pub fn weight_count(&self) -> usize {
        match &self.payload {
            LayerPayload::Dense(csr) => csr.rows() * csr.cols(),
            LayerPayload::Conv { kernel, .. } => kernel.len(),
        }
    }

    /// Stored non-zero weights.
    pub fn nnz(&self) -> usize {
        match &self.payload {
            LayerPayload::Dense(csr) => csr.nnz(),
            LayerPayload::Conv { kernel, .. } => kernel.iter().filter(|&&v| v != 0.0).count(),
        }
    }

    /// The masked weight tensor in its original layout.
    pub fn dense_weight(&self) -> Tensor<f32> {
        match &self.payload {
            LayerPayload::Dense(csr) => {
                Tensor::new(vec![csr.rows(), csr.cols()], csr.to_dense()).expect("csr dims match")
            }
            LayerPayload::Conv { shape, kernel, .. } => {
                Tensor::new(shape.to_vec(), kernel.clone()).expect("kernel dims match")
            }
        }
    }

    fn payload_bytes(&self) -> usize {
        4 * self.bias.len()
            + match &self.payload {
                LayerPayload::Dense(csr) => csr.payload_bytes(),
                LayerPayload::Conv { kernel, mask, .. } => 4 * kernel.len() + mask.len(),
            }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub source_run: Option<String>,
    pub penalties: Option<PenaltyWeights>,
    pub total_nnz: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseModel {
    pub spec: NetworkSpec,
    pub metadata: Metadata,
    pub layers: Vec<SparseLayer>,
}

/// Packs booleans 8 per byte; bit `i % 8` of byte `i / 8` holds entry `i`.
pub fn pack_bits(bits: impl IntoIterator<Item = bool>) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, b) in bits.into_iter().enumerate() {
        if i % 8 == 0 {
            out.push(0);
        }
        if b {
            *out.last_mut().expect("pushed above") |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Thresholds the gates, applies the masks and drops the gates.
pub fn prune(net: &Network) -> SparseModel {
    let layers: Vec<SparseLayer> = net
        .layers
        .iter()
        .map(|layer| {
            let mask = layer.ml_mask();
            let ws = layer.effective_weight();
            let payload = match layer.kind {
                LayerKind::Dense => {
                    let s = ws.shape();
                    LayerPayload::Dense(CsrMatrix::from_dense(s[0], s[1], ws.data()).expect("weight is rank 2"))
                }
                LayerKind::Conv { pool } => {
                    let s = ws.shape();
                    LayerPayload::Conv {
                        shape: [s[0], s[1], s[2], s[3]],
                        kernel: ws.data().to_vec(),
                        mask: pack_bits(mask.iter()),
                        pool,
                    }
                }
            };
            SparseLayer {
                name: layer.name.clone(),
                activation: layer.activation,
                payload,
                bias: layer.bias.data().to_vec(),
            }
        })
        .collect();
    let total_nnz = layers.iter().map(SparseLayer::nnz).sum();
    SparseModel {
        spec: net.spec(),
        metadata: Metadata {
            total_nnz,
            ..Metadata::default()
        },
        layers,
    }
}

/// Parameter counts in the values-plus-indices convention, and exact file bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageCost {
    pub values_count: usize,
    pub index_count: usize,
    pub effective_count: usize,
    pub file_bytes: usize,
}

impl SparseModel {
    pub fn dense_weight_count(&self) -> usize {
        self.layers.iter().map(SparseLayer::weight_count).sum()
    }

    pub fn values_count(&self) -> usize {
        self.layers.iter().map(SparseLayer::nnz).sum()
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            spec: self.spec.clone(),
            metadata: self.metadata.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| match &l.payload {
                    LayerPayload::Dense(csr) => LayerEntry::Csr {
                        name: l.name.clone(),
                        rows: csr.rows(),
                        cols: csr.cols(),
                        nnz: csr.nnz(),
                        biases: l.bias.len(),
                    },
                    LayerPayload::Conv { shape, .. } => LayerEntry::Conv {
                        name: l.name.clone(),
                        shape: *shape,
                        biases: l.bias.len(),
                    },
                })
                .collect(),
        }
    }

    pub fn manifest_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.manifest()).expect("manifest serializes")
    }

    /// Size of the file [`save`] writes for this model.
    pub fn file_size(&self) -> usize {
        HEADER_BYTES + self.manifest_bytes().len() + self.layers.iter().map(SparseLayer::payload_bytes).sum::<usize>()
    }
}

pub fn storage_cost(model: &SparseModel) -> StorageCost {
    let values_count = model.values_count();
    StorageCost {
        values_count,
        index_count: values_count,
        effective_count: 2 * values_count,
        file_bytes: model.file_size(),
    }
}

/// `dense_param_count / values_count`; infinite (with a warning) when nothing survives.
pub fn compression_rate(model: &SparseModel, dense_param_count: usize) -> Result<f64, SparsifyError> {
    if dense_param_count == 0 {
        return Err(SparsifyError::Invalid("dense parameter count must be positive".into()));
    }
    let values = model.values_count();
    if values == 0 {
        log::warn!("model has no stored weights; compression rate is infinite");
        return Ok(f64::INFINITY);
    }
    Ok(dense_param_count as f64 / values as f64)
}

/// Renders a rate as `"24x"` style text; rates below 2 keep one decimal.
pub fn format_rate(rate: f64) -> String {
    if rate.is_infinite() {
        "infx".to_string()
    } else if rate >= 2.0 {
        format!("{rate:.0}x")
    } else {
        let text = format!("{rate:.1}");
        format!("{}x", text.strip_suffix(".0").unwrap_or(&text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub layer: String,
    pub initial: usize,
    pub remaining: usize,
    pub sparsity_pct: f64,
}

/// Per-layer rows followed by a `total` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityTable {
    pub rows: Vec<SparsityRow>,
}

impl SparsityTable {
    fn from_counts(counts: impl IntoIterator<Item = (String, usize, usize)>) -> Self {
        let mut rows: Vec<SparsityRow> = counts
            .into_iter()
            .map(|(layer, initial, remaining)| SparsityRow {
                layer,
                initial,
                remaining,
                sparsity_pct: crate::model::sparsity_pct(remaining, initial),
            })
            .collect();
        let initial = rows.iter().map(|r| r.initial).sum();
        let remaining = rows.iter().map(|r| r.remaining).sum();
        rows.push(SparsityRow {
            layer: "total".into(),
            initial,
            remaining,
            sparsity_pct: crate::model::sparsity_pct(remaining, initial),
        });
        Self { rows }
    }

    /// Counts surviving weights by mask popcount.
    pub fn from_network(net: &Network) -> Self {
        Self::from_counts(net.param_report().into_iter().map(|r| (r.name, r.weights, r.masked_nonzeros)))
    }

    /// Counts stored values.
    pub fn from_model(model: &SparseModel) -> Self {
        Self::from_counts(model.layers.iter().map(|l| (l.name.clone(), l.weight_count(), l.nnz())))
    }

    pub fn total(&self) -> &SparsityRow {
        self.rows.last().expect("total row always present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,initial_params,final_params,sparsity_pct\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{:.1}\n", r.layer, r.initial, r.remaining, r.sparsity_pct));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let header = ["layer", "initial", "final", "sparsity"];
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.layer.clone(),
                    r.initial.to_string(),
                    r.remaining.to_string(),
                    format!("{:.1}%", r.sparsity_pct),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |row: [&str; 4]| {
            format!(
                "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}\n",
                row[0],
                row[1],
                row[2],
                row[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            )
        };
        let mut out = line(header);
        for row in &cells {
            out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: NetworkSpec,
    metadata: Metadata,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerEntry {
    Csr {
        name: String,
        rows: usize,
        cols: usize,
        nnz: usize,
        biases: usize,
    },
    Conv {
        name: String,
        shape: [usize; 4],
        biases: usize,
    },
}

pub fn save(model: &SparseModel, path: &Path) -> Result<(), SparsifyError> {
    let manifest = model.manifest_bytes();
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(&manifest)?;
    for layer in &model.layers {
        match &layer.payload {
            LayerPayload::Dense(csr) => {
                binio::write_u64s(&mut w, csr.row_ptr())?;
                binio::write_u32s(&mut w, csr.col_idx())?;
                binio::write_f32s(&mut w, csr.values())?;
            }
            LayerPayload::Conv { kernel, mask, .. } => {
                binio::write_f32s(&mut w, kernel)?;
                w.write_all(mask)?;
            }
        }
        binio::write_f32s(&mut w, &layer.bias)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SparseModel, SparsifyError> {
    from_bytes(&binio::read_file(path)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<SparseModel, SparsifyError> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(SparsifyError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(SparsifyError::Version(version));
    }
    let len = r.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(len)?)?;
    let shapes = manifest.spec.shapes()?;
    if shapes.len() != manifest.layers.len() {
        return Err(SparsifyError::Manifest(format!(
            "{} layer entries for {} layers",
            manifest.layers.len(),
            shapes.len()
        )));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for ((entry, shape), spec) in manifest.layers.into_iter().zip(shapes).zip(&manifest.spec.layers) {
        let (name, payload, biases) = match entry {
            LayerEntry::Csr {
                name,
                rows,
                cols,
                nnz,
                biases,
            } => {
                if shape.weight != [rows, cols] {
                    return Err(SparsifyError::Manifest(format!("{name}: {rows}×{cols} does not match the architecture")));
                }
                let row_ptr = r.u64s(rows + 1)?;
                let col_idx = r.u32s(nnz)?;
                let values = r.f32s(nnz)?;
                (name, LayerPayload::Dense(CsrMatrix::from_parts(rows, cols, row_ptr, col_idx, values)?), biases)
            }
            LayerEntry::Conv { name, shape: k, biases } => {
                if shape.weight != k {
                    return Err(SparsifyError::Manifest(format!("{name}: kernel {k:?} does not match the architecture")));
                }
                let n = k.iter().product();
                let kernel = r.f32s(n)?;
                let mask = r.take(n.div_ceil(8))?.to_vec();
                let bits = unpack_bits(&mask, n);
                if let Some(i) = kernel.iter().zip(&bits).position(|(&v, &on)| !on && v != 0.0) {
                    return Err(SparsifyError::ConvPayload(format!("{name}: masked entry {i} is non-zero")));
                }
                let pool = matches!(spec, crate::model::LayerSpec::Conv { pool: true, .. });
                (
                    name,
                    LayerPayload::Conv {
                        shape: k,
                        kernel,
                        mask,
                        pool,
                    },
                    biases,
                )
            }
        };
        if biases != shape.bias || name != shape.name {
            return Err(SparsifyError::Manifest(format!("layer {name} does not match the architecture")));
        }
        let activation = match spec {
            crate::model::LayerSpec::Conv { activation, .. } | crate::model::LayerSpec::Dense { activation, .. } => {
                *activation
            }
        };
        layers.push(SparseLayer {
            name,
            activation,
            payload,
            bias: r.f32s(biases)?,
        });
    }
    if r.remaining() != 0 {
        return Err(SparsifyError::Invalid(format!("{} trailing bytes", r.remaining())));
    }
    Ok(SparseModel {
        spec: manifest.spec,
        metadata: manifest.metadata,
        layers,
    })
}

impl From<TensorError> for SparsifyError {
    fn from(e: TensorError) -> Self {
        SparsifyError::Model(e.into())
    }
}
