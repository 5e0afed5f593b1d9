//! Versioned checkpoint files: the magic string `LSMCKPT1`, a JSON header
//! describing named tensors (path, shape, dtype, offset) and scalar state,
//! then a contiguous little-endian f64 payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{LsmError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSMCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    path: String,
    shape: Vec<usize>,
    dtype: String,
    /// Element offset into the payload.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<TensorMeta>,
    scalars: BTreeMap<String, f64>,
    meta: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, ArrayD<f64>>,
    pub scalars: BTreeMap<String, f64>,
    pub meta: BTreeMap<String, String>,
}

pub fn write_checkpoint(
    path: &Path,
    tensors: &[(String, &ArrayD<f64>)],
    scalars: &BTreeMap<String, f64>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut header = Header {
        version: 1,
        tensors: Vec::with_capacity(tensors.len()),
        scalars: scalars.clone(),
        meta: meta.clone(),
    };
    let mut offset = 0u64;
    for (name, arr) in tensors {
        header.tensors.push(TensorMeta {
            path: name.clone(),
            shape: arr.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            len: arr.len() as u64,
        });
        offset += arr.len() as u64;
    }
    let header_json = serde_json::to_vec(&header).expect("serialize header");

    let mut file = fs::File::create(path).map_err(|e| LsmError::io(path, e))?;
    let mut write = |bytes: &[u8]| -> Result<()> {
        file.write_all(bytes).map_err(|e| LsmError::io(path, e))
    };
    write(CHECKPOINT_MAGIC)?;
    write(&(header_json.len() as u64).to_le_bytes())?;
    write(&header_json)?;
    let mut buf = Vec::with_capacity(8 * 1024);
    for (_, arr) in tensors {
        buf.clear();
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = fs::File::open(path).map_err(|e| LsmError::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|e| LsmError::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(LsmError::Checkpoint(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(CHECKPOINT_MAGIC),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| LsmError::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|e| LsmError::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_json).map_err(|e| {
        LsmError::Checkpoint(format!("header parse failed: {e}"))
    })?;
    if header.version != 1 {
        return Err(LsmError::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| LsmError::io(path, e))?;

    let mut tensors = BTreeMap::new();
    for t in &header.tensors {
        if t.dtype != "f64" {
            return Err(LsmError::Checkpoint(format!(
                "tensor {}: unsupported dtype {}",
                t.path, t.dtype
            )));
        }
        let start = (t.offset as usize) * 8;
        let end = start + (t.len as usize) * 8;
        if end > payload.len() {
            return Err(LsmError::Checkpoint(format!(
                "tensor {} extends past payload",
                t.path
            )));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expected: usize = t.shape.iter().product();
        if expected != values.len() {
            return Err(LsmError::Checkpoint(format!(
                "tensor {}: shape {:?} does not hold {} elements",
                t.path,
                t.shape,
                values.len()
            )));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), values)
            .map_err(|e| LsmError::Checkpoint(e.to_string()))?;
        tensors.insert(t.path.clone(), arr);
    }

    Ok(Checkpoint {
        tensors,
        scalars: header.scalars,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.5, -3.0, 0.0, 9.9, 7.0])
            .unwrap();
        let b = ArrayD::from_elem(IxDyn(&[4]), 0.125);
        let tensors = vec![("w".to_string(), &a), ("b".to_string(), &b)];
        let mut scalars = BTreeMap::new();
        scalars.insert("step".to_string(), 42.0);
        let mut meta = BTreeMap::new();
        meta.insert("role".to_string(), "test".to_string());
        write_checkpoint(&path, &tensors, &scalars, &meta).unwrap();

        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.tensors["w"], a);
        assert_eq!(ck.tensors["b"], b);
        assert_eq!(ck.scalars["step"], 42.0);
        assert_eq!(ck.meta["role"], "test");
    }

    #[test]
    fn wrong_magic_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTMAGIC????????").unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("LSMCKPT1") && msg.contains("NOTMAGIC"), "{msg}");
    }
}
