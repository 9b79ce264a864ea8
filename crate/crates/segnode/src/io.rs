//! File formats and atomic output staging.
//!
//! Tensor files use the "SGNT v1" layout: magic bytes `SGNT`, a version byte
//! (1), a dtype byte (0 = f32, 1 = f64), a rank byte, `rank` little-endian
//! u32 extents, then the little-endian element payload. Round-trips are
//! bit-exact.
//!
//! Manifests, histories and reports are line-oriented `key = value` text.
//! Commands write all artifacts into a staging directory that is renamed
//! into place only on success, so failures leave nothing behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"SGNT";
pub const TENSOR_VERSION: u8 = 1;

/// Serializes a tensor into the SGNT v1 byte layout.
pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + t.numel() * T::BYTES);
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parses an SGNT v1 byte buffer into a tensor of element type `T`.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (dtype, shape, payload) = split_header(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {dtype:?}, expected {:?}",
            T::DTYPE
        )));
    }
    let numel: usize = shape.iter().product();
    if payload.len() != numel * T::BYTES {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            numel * T::BYTES
        )));
    }
    let data = payload
        .chunks_exact(T::BYTES)
        .map(T::read_le)
        .collect::<Vec<_>>();
    Ok(Tensor::from_vec(&shape, data))
}

fn split_header(bytes: &[u8]) -> Result<(Dtype, Vec<usize>, &[u8])> {
    if bytes.len() < 7 {
        return Err(Error::Format("file too short for an SGNT header".into()));
    }
    if bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..4],
            TENSOR_MAGIC
        )));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = Dtype::from_tag(bytes[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    if rank > 4 {
        return Err(Error::Format(format!("rank {rank} exceeds 4")));
    }
    let dims_end = 7 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format("file truncated inside the extent list".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().unwrap());
        if d == 0 {
            return Err(Error::Format("zero extent".into()));
        }
        shape.push(d as usize);
    }
    Ok((dtype, shape, &bytes[dims_end..]))
}

/// Dtype of a tensor file without loading the payload.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    split_header(&bytes).map(|(d, _, _)| d)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_tensor(&bytes)
}

// ---------------------------------------------------------------------------
// key = value text
// ---------------------------------------------------------------------------

/// Formats one `key=value` record line (fields separated by single spaces).
pub fn record_line(pairs: &[(&str, String)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses a `key=value` record line.
pub fn parse_record_line(line: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for field in line.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed record field `{field}`")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

/// Writes a `key = value` document (one pair per line).
pub fn write_kv_file(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    fs::write(path, kv_text(pairs)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn kv_text(pairs: &[(String, String)]) -> String {
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(v);
        text.push('\n');
    }
    text
}

/// Reads a `key = value` document, preserving line order. `#` starts a comment.
pub fn read_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                lineno + 1
            ))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn kv_lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("missing key `{key}`")))
}

// ---------------------------------------------------------------------------
// Staged output directories
// ---------------------------------------------------------------------------

/// A directory assembled under a temporary name and renamed into place on
/// commit. Dropping without committing removes everything written so far.
pub struct StagedDir {
    staging: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl StagedDir {
    /// Starts staging for `dest`, which must not already exist.
    pub fn begin(dest: &Path) -> Result<StagedDir> {
        if dest.exists() {
            return Err(Error::Config(format!(
                "output path {} already exists",
                dest.display()
            )));
        }
        let staging = dest.with_extension(format!("partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)
                .map_err(|e| Error::io(staging.display().to_string(), e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(staging.display().to_string(), e))?;
        Ok(StagedDir {
            staging,
            dest: dest.to_path_buf(),
            committed: false,
        })
    }

    /// Path of a file inside the staging area.
    pub fn file(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.file(name);
        let mut f =
            fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Renames the staging directory to the destination.
    pub fn commit(mut self) -> Result<PathBuf> {
        fs::rename(&self.staging, &self.dest)
            .map_err(|e| Error::io(self.dest.display().to_string(), e))?;
        self.committed = true;
        Ok(self.dest.clone())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
