//! Training checkpoints: the full gated network (weights, biases, gates).
//!
//! Layout, little-endian: `b"SGCK"`, `u16` version, `u32` header length, JSON
//! header, then for each layer the weight, bias and gate values as `f32`.

use super::{GatedLayer, LayerKind, LayerSpec, ModelError, Network, NetworkSpec};
use crate::binio::{self, ByteReader, ShortRead};
use crate::gates::GateTensor;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SGCK";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated at byte {offset} (needed {needed} more)")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<ShortRead> for CheckpointError {
    fn from(s: ShortRead) -> Self {
        CheckpointError::Truncated {
            offset: s.offset,
            needed: s.needed,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    gates_trainable: Vec<bool>,
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<(), CheckpointError> {
    let header = serde_json::to_vec(&Header {
        spec: net.spec(),
        gates_trainable: net.layers.iter().map(|l| l.gates.trainable).collect(),
    })?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for layer in &net.layers {
        binio::write_f32s(&mut w, layer.weight.data())?;
        binio::write_f32s(&mut w, layer.bias.data())?;
        binio::write_f32s(&mut w, layer.gates.values().data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network, CheckpointError> {
    let bytes = binio::read_file(path)?;
    let mut r = ByteReader::new(&bytes);
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    let shapes = header.spec.shapes()?;
    if header.gates_trainable.len() != shapes.len() {
        return Err(ModelError::Config("gate flags do not match layer count".into()).into());
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for ((shape, spec), trainable) in shapes.into_iter().zip(&header.spec.layers).zip(header.gates_trainable) {
        let n: usize = shape.weight.iter().product();
        let weight = Tensor::new(shape.weight.clone(), r.f32s(n)?).map_err(ModelError::from)?;
        let bias = Tensor::new(vec![shape.bias], r.f32s(shape.bias)?).map_err(ModelError::from)?;
        let mut gates =
            GateTensor::from_tensor(Tensor::new(shape.weight.clone(), r.f32s(n)?).map_err(ModelError::from)?);
        gates.trainable = trainable;
        let (kind, activation) = match spec {
            LayerSpec::Conv { pool, activation, .. } => (LayerKind::Conv { pool: *pool }, *activation),
            LayerSpec::Dense { activation, .. } => (LayerKind::Dense, *activation),
        };
        layers.push(GatedLayer {
            name: shape.name,
            kind,
            activation,
            weight,
            bias,
            gates,
            gated: spec.gated(),
        });
    }
    if r.remaining() != 0 {
        return Err(ModelError::Config(format!("{} trailing bytes after checkpoint", r.remaining())).into());
    }
    Ok(Network::from_parts(header.spec, layers)?)
}
