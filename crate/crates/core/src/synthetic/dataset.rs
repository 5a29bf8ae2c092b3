//! Versioned dataset container: a JSON spec header, an offset table for
//! lazy per-pair access, per-pair blocks (line sets as JSON, embedded
//! descriptor-map blobs, the homography, and the ground-truth matrix), and
//! a trailing SHA-256 over the whole file. Multi-byte values are
//! little-endian.

use std::fs::File;
use std::io::{BufReader, Cursor, Read, Seek, SeekFrom};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, Matrix3};
use sha2::{Digest, Sha256};

use super::{HomographySpec, NoiseConfig, Result, SceneSpec, SyntheticError, SyntheticPair};
use crate::geometry::{Homography, LineSegment2D, OverlapMatrix};
use crate::model::{read_descriptor_map, write_descriptor_map, ConfidenceModel};
use crate::training::TrainingPair;

const DATASET_MAGIC: &[u8; 4] = b"LWDS";
const DATASET_VERSION: u32 = 1;

/// Generation metadata stored in the header; combined with a pair index it
/// regenerates any pair bit-exactly.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetHeader {
    pub scene: SceneSpec,
    pub homography: HomographySpec,
    pub noise: NoiseConfig,
    pub count: usize,
    pub stride: u32,
    pub dim: usize,
}

fn write_json<T: serde::Serialize>(buf: &mut Vec<u8>, value: &T) -> Result<()> {
    let json =
        serde_json::to_string(value).map_err(|e| SyntheticError::Malformed(e.to_string()))?;
    buf.write_u64::<LittleEndian>(json.len() as u64).unwrap();
    buf.extend_from_slice(json.as_bytes());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(r: &mut impl Read) -> Result<T> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 28 {
        return Err(SyntheticError::Malformed(format!(
            "json block of {len} bytes is implausible"
        )));
    }
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    serde_json::from_slice(&bytes).map_err(|e| SyntheticError::Malformed(e.to_string()))
}

fn write_pair_block(buf: &mut Vec<u8>, pair: &SyntheticPair) -> Result<()> {
    buf.write_u64::<LittleEndian>(pair.scene.seed).unwrap();
    buf.write_u64::<LittleEndian>(pair.homography.seed).unwrap();
    buf.write_u64::<LittleEndian>(pair.seed).unwrap();

    write_json(buf, &pair.pair.lines1)?;
    write_json(buf, &pair.pair.lines2)?;
    write_json(buf, &pair.pair.confidence1)?;
    write_json(buf, &pair.pair.confidence2)?;

    for map in [&pair.pair.map1, &pair.pair.map2] {
        let mut blob = Vec::new();
        write_descriptor_map(&mut blob, map)?;
        buf.write_u64::<LittleEndian>(blob.len() as u64).unwrap();
        buf.extend_from_slice(&blob);
    }

    let h = pair.pair.h_gt.matrix();
    for r in 0..3 {
        for c in 0..3 {
            buf.write_f64::<LittleEndian>(h[(r, c)]).unwrap();
        }
    }

    let gt = &pair.pair.gt;
    buf.write_u64::<LittleEndian>(gt.entries().nrows() as u64)
        .unwrap();
    buf.write_u64::<LittleEndian>(gt.entries().ncols() as u64)
        .unwrap();
    for &id in gt.row_ids() {
        buf.write_u32::<LittleEndian>(id).unwrap();
    }
    for &id in gt.col_ids() {
        buf.write_u32::<LittleEndian>(id).unwrap();
    }
    for r in 0..gt.entries().nrows() {
        for c in 0..gt.entries().ncols() {
            buf.write_f64::<LittleEndian>(gt.entries()[(r, c)]).unwrap();
        }
    }
    Ok(())
}

fn read_pair_block(r: &mut impl Read, header: &DatasetHeader) -> Result<SyntheticPair> {
    let scene_seed = r.read_u64::<LittleEndian>()?;
    let homography_seed = r.read_u64::<LittleEndian>()?;
    let pair_seed = r.read_u64::<LittleEndian>()?;

    let lines1: Vec<LineSegment2D> = read_json(r)?;
    let lines2: Vec<LineSegment2D> = read_json(r)?;
    let confidence1: ConfidenceModel = read_json(r)?;
    let confidence2: ConfidenceModel = read_json(r)?;

    let read_map = |r: &mut dyn Read| -> Result<_> {
        let len = r.read_u64::<LittleEndian>()? as usize;
        if len > 1 << 30 {
            return Err(SyntheticError::Malformed(
                "descriptor map blob too large".into(),
            ));
        }
        let mut blob = vec![0u8; len];
        r.read_exact(&mut blob)?;
        Ok(read_descriptor_map(&mut Cursor::new(blob))?)
    };
    let map1 = read_map(r)?;
    let map2 = read_map(r)?;

    let mut m = Matrix3::zeros();
    for row in 0..3 {
        for col in 0..3 {
            m[(row, col)] = r.read_f64::<LittleEndian>()?;
        }
    }
    let h_gt = Homography::new(m)
        .map_err(|e| SyntheticError::Malformed(format!("stored homography: {e}")))?;

    let rows = r.read_u64::<LittleEndian>()? as usize;
    let cols = r.read_u64::<LittleEndian>()? as usize;
    if rows != lines1.len() || cols != lines2.len() {
        return Err(SyntheticError::Malformed(format!(
            "gt is {rows}x{cols} but line sets have {} and {} entries",
            lines1.len(),
            lines2.len()
        )));
    }
    let mut row_ids = vec![0u32; rows];
    for id in &mut row_ids {
        *id = r.read_u32::<LittleEndian>()?;
    }
    let mut col_ids = vec![0u32; cols];
    for id in &mut col_ids {
        *id = r.read_u32::<LittleEndian>()?;
    }
    let mut entries = DMatrix::zeros(rows, cols);
    for row in 0..rows {
        for col in 0..cols {
            entries[(row, col)] = r.read_f64::<LittleEndian>()?;
        }
    }
    let gt = OverlapMatrix::new(entries, row_ids, col_ids);

    let mut scene = header.scene;
    scene.seed = scene_seed;
    let mut homography = header.homography;
    homography.seed = homography_seed;

    Ok(SyntheticPair {
        pair: TrainingPair {
            lines1,
            lines2,
            map1,
            map2,
            h_gt,
            gt,
            confidence1,
            confidence2,
        },
        scene,
        homography,
        noise: header.noise,
        seed: pair_seed,
    })
}

/// Writes a dataset file. Pair order is preserved; repeated saves of the
/// same pairs are byte-identical.
pub fn save_dataset(path: &Path, header: &DatasetHeader, pairs: &[SyntheticPair]) -> Result<()> {
    if header.count != pairs.len() {
        return Err(SyntheticError::Malformed(format!(
            "header count {} != {} pairs",
            header.count,
            pairs.len()
        )));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.write_u32::<LittleEndian>(DATASET_VERSION).unwrap();
    write_json(&mut buf, header)?;

    buf.write_u64::<LittleEndian>(pairs.len() as u64).unwrap();
    let offsets_at = buf.len();
    for _ in pairs {
        buf.write_u64::<LittleEndian>(0).unwrap();
    }
    let mut offsets = Vec::with_capacity(pairs.len());
    for pair in pairs {
        offsets.push(buf.len() as u64);
        write_pair_block(&mut buf, pair)?;
    }
    for (i, off) in offsets.iter().enumerate() {
        buf[offsets_at + 8 * i..offsets_at + 8 * (i + 1)].copy_from_slice(&off.to_le_bytes());
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

/// Open dataset with an offset table for random per-pair access. The whole
/// file is checksummed once at open.
pub struct DatasetReader {
    file: File,
    header: DatasetHeader,
    offsets: Vec<u64>,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let total = file.metadata()?.len();
        if total < 48 {
            return Err(SyntheticError::Malformed("file too small".into()));
        }

        // Streamed checksum over everything except the trailing digest.
        let payload_len = total - 32;
        let mut hasher = Sha256::new();
        {
            let mut reader = BufReader::with_capacity(1 << 20, &mut file);
            let mut remaining = payload_len;
            let mut chunk = vec![0u8; 1 << 20];
            while remaining > 0 {
                let take = remaining.min(chunk.len() as u64) as usize;
                reader.read_exact(&mut chunk[..take])?;
                hasher.update(&chunk[..take]);
                remaining -= take as u64;
            }
            let mut stored = [0u8; 32];
            reader.read_exact(&mut stored)?;
            if hasher.finalize().as_slice() != stored {
                return Err(SyntheticError::ChecksumMismatch);
            }
        }

        file.seek(SeekFrom::Start(0))?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(SyntheticError::BadMagic);
        }
        let version = file.read_u32::<LittleEndian>()?;
        if version != DATASET_VERSION {
            return Err(SyntheticError::UnsupportedVersion(version));
        }
        let header: DatasetHeader = read_json(&mut file)?;
        let count = file.read_u64::<LittleEndian>()? as usize;
        if count != header.count {
            return Err(SyntheticError::Malformed(format!(
                "header count {} != table count {count}",
                header.count
            )));
        }
        let mut offsets = vec![0u64; count];
        for off in &mut offsets {
            *off = file.read_u64::<LittleEndian>()?;
            if *off >= payload_len {
                return Err(SyntheticError::Malformed("offset beyond payload".into()));
            }
        }
        Ok(Self {
            file,
            header,
            offsets,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn read_pair(&mut self, index: usize) -> Result<SyntheticPair> {
        let offset = *self
            .offsets
            .get(index)
            .ok_or(SyntheticError::PairOutOfRange {
                index,
                count: self.offsets.len(),
            })?;
        self.file.seek(SeekFrom::Start(offset))?;
        let mut reader = BufReader::with_capacity(1 << 20, &mut self.file);
        read_pair_block(&mut reader, &self.header)
    }

    pub fn read_all(&mut self) -> Result<Vec<SyntheticPair>> {
        (0..self.len()).map(|i| self.read_pair(i)).collect()
    }
}

/// Reads every pair of a dataset file.
pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SyntheticPair>)> {
    let mut reader = DatasetReader::open(path)?;
    let pairs = reader.read_all()?;
    Ok((reader.header.clone(), pairs))
}
