//! Binary checkpoint format.
//!
//! ```text
//! b"ARMMT1"                 6 bytes magic
//! version                   u32 little-endian
//! header length             u64 little-endian
//! header                    JSON: configs, variant, step, manifest
//! payload                   f64 little-endian values
//! ```
//!
//! Each manifest entry owns `2 · len` consecutive payload floats starting at
//! `offset`: the parameter values followed by its AdaGrad accumulator. Entries
//! tile the payload exactly, in order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::model::{init_params, Armmt, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 6] = b"ARMMT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    variant: Variant,
    train: Option<TrainConfig>,
    step: u64,
    manifest: Vec<ManifestEntry>,
}

/// A trained (or freshly initialized) model plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Armmt,
    /// Training configuration that produced the parameters, if any.
    pub train: Option<TrainConfig>,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(model: Armmt, train: Option<TrainConfig>, step: u64) -> Self {
        Checkpoint { model, train, step }
    }
}

fn manifest(params: &ParamStore) -> Vec<ManifestEntry> {
    let mut offset = 0;
    params
        .iter()
        .map(|p| {
            let len = p.value.len();
            let entry = ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                frozen: p.frozen,
                offset,
                len,
            };
            offset += 2 * len;
            entry
        })
        .collect()
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> std::io::Result<()> {
    let header = Header {
        model: ckpt.model.config,
        variant: ckpt.model.variant,
        train: ckpt.train,
        step: ckpt.step,
        manifest: manifest(&ckpt.model.params),
    };
    let header = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for p in ckpt.model.params.iter() {
        for v in p.value.data().iter().chain(p.accumulator.data()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_checkpoint(BufWriter::new(file), ckpt).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let file = File::open(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    read_checkpoint(&bytes)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Malformed(format!("truncated {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut rest = bytes;
    if rest.len() < MAGIC.len() || &rest[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic(
            rest[..rest.len().min(MAGIC.len())].to_vec(),
        ));
    }
    rest = &rest[MAGIC.len()..];
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(take(&mut rest, 8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len)
        .map_err(|_| CheckpointError::Malformed("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(&mut rest, header_len, "header")?)
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;

    let mut expected_offset = 0;
    for entry in &header.manifest {
        if entry.offset != expected_offset || entry.shape.iter().product::<usize>() != entry.len {
            return Err(CheckpointError::Malformed(format!(
                "manifest entry `{}` does not tile the payload",
                entry.name
            )));
        }
        expected_offset += 2 * entry.len;
    }
    if rest.len() % 8 != 0 || rest.len() / 8 != expected_offset {
        return Err(CheckpointError::SizeMismatch {
            manifest: expected_offset,
            payload: rest.len() / 8,
        });
    }
    let payload: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let reference = init_params(&header.model, header.variant, 0)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if reference.len() != header.manifest.len() {
        return Err(CheckpointError::Malformed(format!(
            "variant {} has {} parameters, manifest lists {}",
            header.variant,
            reference.len(),
            header.manifest.len()
        )));
    }
    let mut params = ParamStore::new();
    for entry in &header.manifest {
        match reference.by_name(&entry.name) {
            Some(p) if p.value.shape() == entry.shape.as_slice() => {}
            _ => {
                return Err(CheckpointError::Malformed(format!(
                    "parameter `{}` {:?} does not belong to variant {}",
                    entry.name, entry.shape, header.variant
                )))
            }
        }
        let tensor = |start: usize| {
            Tensor::new(entry.shape.clone(), payload[start..start + entry.len].to_vec())
                .map_err(|e| CheckpointError::Malformed(e.to_string()))
        };
        let value = tensor(entry.offset)?;
        let accumulator = tensor(entry.offset + entry.len)?;
        let id = params.insert(&entry.name, value, entry.frozen);
        params.get_mut(id).accumulator = accumulator;
    }
    Ok(Checkpoint {
        model: Armmt {
            config: header.model,
            variant: header.variant,
            params,
        },
        train: header.train,
        step: header.step,
    })
}
