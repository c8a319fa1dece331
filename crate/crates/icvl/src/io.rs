//! The ICVLMAT binary matrix format and the directory-based tensor archive.
//!
//! ICVLMAT layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "ICVL"
//! version u32      currently 1
//! dtype   u8       0 = f64, 1 = f32
//! rows    u64
//! dims    u64
//! payload rows*dims values, row-major, little-endian
//! ```
//!
//! Writers always emit little-endian. The in-memory representation is f64;
//! f32 payloads are widened on read and narrowed on write.
//!
//! A tensor archive is a directory with a `manifest.json` naming each tensor
//! (name, shape, file, plus the seed the parameters were initialized from)
//! and one ICVLMAT file per tensor. Checkpoints for every model in this crate
//! use it.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IcvlError, Result};
use crate::matrix::EmbeddingMatrix;

pub const MAGIC: [u8; 4] = *b"ICVL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(IcvlError::format(format!("unknown dtype code {other}"))),
        }
    }
}

pub fn write_matrix(w: &mut impl Write, m: &EmbeddingMatrix, dtype: Dtype) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype.code()])?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.dims() as u64).to_le_bytes())?;
    match dtype {
        Dtype::F64 => {
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for v in m.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_matrix(r: &mut impl Read) -> Result<EmbeddingMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| IcvlError::format("truncated ICVLMAT header"))?;
    if magic != MAGIC {
        return Err(IcvlError::format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(IcvlError::format(format!(
            "unsupported ICVLMAT version {version}"
        )));
    }
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    let dtype = Dtype::from_code(byte[0])?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)?;
    let dims = u64::from_le_bytes(u64buf) as usize;

    let count = rows
        .checked_mul(dims)
        .ok_or_else(|| IcvlError::format("ICVLMAT shape overflow"))?;
    let mut data = Vec::with_capacity(count);
    match dtype {
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut buf)
                    .map_err(|_| IcvlError::format("truncated ICVLMAT payload"))?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..count {
                r.read_exact(&mut buf)
                    .map_err(|_| IcvlError::format("truncated ICVLMAT payload"))?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
    }
    EmbeddingMatrix::from_vec(rows, dims, data)
}

pub fn write_matrix_file(path: impl AsRef<Path>, m: &EmbeddingMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_matrix(&mut f, m, Dtype::F64)?;
    f.flush()?;
    Ok(())
}

pub fn read_matrix_file(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    read_matrix(&mut f)
}

pub fn matrix_to_bytes(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(29 + m.data().len() * 8);
    write_matrix(&mut buf, m, Dtype::F64).expect("writing to Vec cannot fail");
    buf
}

pub fn matrix_from_bytes(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut cursor = bytes;
    read_matrix(&mut cursor)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub dims: usize,
    pub file: String,
}

/// Text manifest of a checkpoint directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub kind: String,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, u64>,
}

/// Write `tensors` (in the given order) plus a manifest into `dir`.
pub fn save_archive(
    dir: impl AsRef<Path>,
    kind: &str,
    seed: u64,
    tensors: &[(String, &EmbeddingMatrix)],
) -> Result<()> {
    save_archive_with_meta(dir, kind, seed, tensors, BTreeMap::new())
}

/// [`save_archive`] with extra integer metadata in the manifest.
pub fn save_archive_with_meta(
    dir: impl AsRef<Path>,
    kind: &str,
    seed: u64,
    tensors: &[(String, &EmbeddingMatrix)],
    meta: BTreeMap<String, u64>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (i, (name, m)) in tensors.iter().enumerate() {
        let file = format!("{i:03}.icvlmat");
        write_matrix_file(dir.join(&file), m)?;
        entries.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            dims: m.dims(),
            file,
        });
    }
    let manifest = ArchiveManifest {
        kind: kind.to_string(),
        seed,
        tensors: entries,
        meta,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a checkpoint directory; shapes are validated against the manifest.
pub fn load_archive(
    dir: impl AsRef<Path>,
) -> Result<(ArchiveManifest, BTreeMap<String, EmbeddingMatrix>)> {
    let dir = dir.as_ref();
    let manifest: ArchiveManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        let m = read_matrix_file(dir.join(&entry.file))?;
        if m.shape() != (entry.rows, entry.dims) {
            return Err(IcvlError::format(format!(
                "tensor {} is {}x{} but manifest says {}x{}",
                entry.name,
                m.rows(),
                m.dims(),
                entry.rows,
                entry.dims
            )));
        }
        tensors.insert(entry.name.clone(), m);
    }
    Ok((manifest, tensors))
}
