//! Binary persistence: checkpoints (config + named parameter blobs +
//! optional optimizer state, with a trailing SHA-256) and descriptor-map
//! files. All multi-byte values are little-endian.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{DescriptorMap, ModelConfig, ModelError, Result};
use crate::tensor::{AdamState, ParameterSet, Tensor};

const CHECKPOINT_MAGIC: &[u8; 4] = b"LWCK";
const CHECKPOINT_VERSION: u32 = 1;
const MAP_MAGIC: &[u8; 4] = b"LWDM";

/// Everything needed to restore a model (and optionally resume training).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub optimizer: Option<OptimizerCheckpoint>,
}

/// Adam state plus the training step it was taken at.
#[derive(Debug, Clone)]
pub struct OptimizerCheckpoint {
    pub state: AdamState,
    pub trained_steps: u64,
}

fn write_string(buf: &mut Vec<u8>, s: &str) {
    buf.write_u64::<LittleEndian>(s.len() as u64).unwrap();
    buf.extend_from_slice(s.as_bytes());
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 24 {
        return Err(ModelError::Malformed(format!(
            "string length {len} is implausible"
        )));
    }
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|_| ModelError::Malformed("non-utf8 string".into()))
}

fn write_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.write_f64::<LittleEndian>(v).unwrap();
    }
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    for slot in &mut out {
        *slot = r.read_f64::<LittleEndian>()?;
    }
    Ok(out)
}

/// Serializes a checkpoint to bytes. Parameter order is the set's insertion
/// order, so repeated saves of the same state are byte-identical.
pub fn checkpoint_to_bytes(checkpoint: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();

    let config_json = serde_json::to_string(&checkpoint.config)
        .map_err(|e| ModelError::Malformed(e.to_string()))?;
    write_string(&mut buf, &config_json);

    buf.write_u64::<LittleEndian>(checkpoint.params.len() as u64)
        .unwrap();
    for p in checkpoint.params.iter() {
        write_string(&mut buf, &p.name);
        buf.write_u64::<LittleEndian>(p.tensor.rows() as u64)
            .unwrap();
        buf.write_u64::<LittleEndian>(p.tensor.cols() as u64)
            .unwrap();
        buf.write_u8(p.trainable as u8).unwrap();
        write_f64s(&mut buf, p.tensor.values());
    }

    match &checkpoint.optimizer {
        None => buf.write_u8(0).unwrap(),
        Some(opt) => {
            buf.write_u8(1).unwrap();
            buf.write_f64::<LittleEndian>(opt.state.lr).unwrap();
            buf.write_f64::<LittleEndian>(opt.state.beta1).unwrap();
            buf.write_f64::<LittleEndian>(opt.state.beta2).unwrap();
            buf.write_f64::<LittleEndian>(opt.state.epsilon).unwrap();
            buf.write_u64::<LittleEndian>(opt.state.step).unwrap();
            buf.write_u64::<LittleEndian>(opt.trained_steps).unwrap();
            let named: Vec<&str> = checkpoint
                .params
                .iter()
                .filter(|p| opt.state.moments(&p.name).is_some())
                .map(|p| p.name.as_str())
                .collect();
            buf.write_u64::<LittleEndian>(named.len() as u64).unwrap();
            for name in named {
                let (m, v) = opt.state.moments(name).expect("filtered");
                write_string(&mut buf, name);
                buf.write_u64::<LittleEndian>(m.len() as u64).unwrap();
                write_f64s(&mut buf, m);
                write_f64s(&mut buf, v);
            }
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 36 {
        return Err(ModelError::Malformed("file too small".into()));
    }
    let (payload, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != checksum {
        return Err(ModelError::ChecksumMismatch);
    }

    let mut r = Cursor::new(payload);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }

    let config_json = read_string(&mut r)?;
    let config: ModelConfig =
        serde_json::from_str(&config_json).map_err(|e| ModelError::Malformed(e.to_string()))?;
    config.validate()?;

    let n_params = r.read_u64::<LittleEndian>()? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..n_params {
        let name = read_string(&mut r)?;
        let rows = r.read_u64::<LittleEndian>()? as usize;
        let cols = r.read_u64::<LittleEndian>()? as usize;
        let trainable = r.read_u8()? != 0;
        if rows * cols > 1 << 28 {
            return Err(ModelError::Malformed(format!(
                "parameter {name} is implausibly large"
            )));
        }
        let values = read_f64s(&mut r, rows * cols)?;
        params.insert(&name, Tensor::new([rows, cols], values)?)?;
        params.get_mut(&name)?.trainable = trainable;
    }

    let optimizer = if r.read_u8()? != 0 {
        let lr = r.read_f64::<LittleEndian>()?;
        let mut state = AdamState::new(lr);
        state.beta1 = r.read_f64::<LittleEndian>()?;
        state.beta2 = r.read_f64::<LittleEndian>()?;
        state.epsilon = r.read_f64::<LittleEndian>()?;
        state.step = r.read_u64::<LittleEndian>()?;
        let trained_steps = r.read_u64::<LittleEndian>()?;
        let entries = r.read_u64::<LittleEndian>()? as usize;
        for _ in 0..entries {
            let name = read_string(&mut r)?;
            let len = r.read_u64::<LittleEndian>()? as usize;
            let expected = params.get(&name)?.tensor.values().len();
            if len != expected {
                return Err(ModelError::Malformed(format!(
                    "optimizer moments for {name} have length {len}, parameter has {expected}"
                )));
            }
            let m = read_f64s(&mut r, len)?;
            let v = read_f64s(&mut r, len)?;
            state.set_moments(&name, m, v);
        }
        Some(OptimizerCheckpoint {
            state,
            trained_steps,
        })
    } else {
        None
    };

    if r.position() as usize != payload.len() {
        return Err(ModelError::Malformed(
            "trailing bytes after checkpoint payload".into(),
        ));
    }

    Ok(Checkpoint {
        config,
        params,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(checkpoint)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Writes a descriptor map: magic, `{height, width, stride, dim}`, then the
/// grid as row-major `f32`.
pub fn write_descriptor_map(w: &mut impl Write, map: &DescriptorMap) -> Result<()> {
    w.write_all(MAP_MAGIC)?;
    w.write_u32::<LittleEndian>(map.height())?;
    w.write_u32::<LittleEndian>(map.width())?;
    w.write_u32::<LittleEndian>(map.stride())?;
    w.write_u32::<LittleEndian>(map.dim() as u32)?;
    for &v in map.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_descriptor_map(r: &mut impl Read) -> Result<DescriptorMap> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAP_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let height = r.read_u32::<LittleEndian>()?;
    let width = r.read_u32::<LittleEndian>()?;
    let stride = r.read_u32::<LittleEndian>()?;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    if width == 0 || height == 0 || stride == 0 || dim == 0 || dim > 1 << 16 {
        return Err(ModelError::Malformed(
            "descriptor map header out of range".into(),
        ));
    }
    let grid_w = (width as usize).div_ceil(stride as usize);
    let grid_h = (height as usize).div_ceil(stride as usize);
    let mut data = vec![0f32; grid_w * grid_h * dim];
    for slot in &mut data {
        *slot = r.read_f32::<LittleEndian>()?;
    }
    DescriptorMap::new(width, height, stride, dim, data)
}

pub fn save_descriptor_map(path: &Path, map: &DescriptorMap) -> Result<()> {
    let mut buf = Vec::new();
    write_descriptor_map(&mut buf, map)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_descriptor_map(path: &Path) -> Result<DescriptorMap> {
    read_descriptor_map(&mut Cursor::new(std::fs::read(path)?))
}
