//! Self-describing tensor archive: a JSON header (arbitrary metadata plus a
//! tensor index) followed by raw little-endian blobs. Used for every
//! checkpoint in the workspace.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::param::Param;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"VILPTEN1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save_archive<T: Scalar>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, Array<T>)],
) -> io::Result<()> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, a)| TensorEntry {
                name: name.clone(),
                dtype: T::DTYPE.to_string(),
                shape: a.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        let mut buf = Vec::new();
        for (_, a) in tensors {
            buf.clear();
            T::write_le_bytes(a.data(), &mut buf);
            w.write_all(&buf)?;
        }
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_archive<T: Scalar>(
    path: &Path,
) -> io::Result<(serde_json::Value, Vec<(String, Array<T>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(io::Error::other(format!("{}: not a tensor archive", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let elem = std::mem::size_of::<T>();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != T::DTYPE {
            return Err(io::Error::other(format!(
                "tensor {} has dtype {}, expected {}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; n * elem];
        r.read_exact(&mut bytes)?;
        tensors.push((e.name.clone(), Array::from_vec(&e.shape, T::read_le_bytes(&bytes))));
    }
    Ok((header.meta, tensors))
}

/// Save every parameter of a model (by registered name) with metadata.
pub fn save_params<T: Scalar>(
    path: &Path,
    meta: &serde_json::Value,
    params: &[Param<T>],
) -> io::Result<()> {
    let tensors: Vec<(String, Array<T>)> =
        params.iter().map(|p| (p.name(), p.value())).collect();
    save_archive(path, meta, &tensors)
}

/// Load parameter values by name into an already-constructed model.
/// Every param must be present in the archive and shapes must match.
pub fn load_params<T: Scalar>(path: &Path, params: &[Param<T>]) -> io::Result<serde_json::Value> {
    let (meta, tensors) = load_archive::<T>(path)?;
    let by_name: std::collections::HashMap<String, Array<T>> = tensors.into_iter().collect();
    for p in params {
        let name = p.name();
        let arr = by_name.get(&name).ok_or_else(|| {
            io::Error::other(format!("missing parameter {name} in {}", path.display()))
        })?;
        if arr.shape() != p.shape() {
            return Err(io::Error::other(format!(
                "parameter {name}: archive shape {:?} vs model shape {:?}",
                arr.shape(),
                p.shape()
            )));
        }
        p.set_value(arr.clone());
    }
    Ok(meta)
}

/// FNV-1a checksum over the exact bit patterns of all parameter values.
/// Used by tests that assert a model stayed frozen.
pub fn params_checksum<T: Scalar>(params: &[Param<T>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut buf = Vec::new();
    for p in params {
        for b in p.name().as_bytes() {
            h = (h ^ *b as u64).wrapping_mul(0x100_0000_01b3);
        }
        buf.clear();
        T::write_le_bytes(p.value().data(), &mut buf);
        for b in &buf {
            h = (h ^ *b as u64).wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}
