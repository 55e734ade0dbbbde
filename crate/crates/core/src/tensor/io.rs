//! Raw little-endian tensor blobs described by a JSON manifest.
//!
//! A blob is the concatenation of row-major tensors; the manifest lists each
//! tensor's name, shape, byte offset and element type.

use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

/// Standalone manifest for [`save_tensors`] / [`load_tensors`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorManifest {
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<'a, I>(tensors: I, dtype: Dtype) -> (Vec<u8>, Vec<TensorEntry>)
where
    I: IntoIterator<Item = (String, &'a Tensor)>,
{
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            dtype,
        });
        for &v in t.data() {
            match dtype {
                Dtype::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    (blob, entries)
}

/// Decodes every entry; `origin` names the blob in error messages.
pub fn decode(blob: &[u8], entries: &[TensorEntry], origin: &Path) -> Result<Vec<(String, Tensor)>> {
    entries
        .iter()
        .map(|e| {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + numel * e.dtype.size();
            if end > blob.len() {
                return Err(Error::Format {
                    file: origin.to_path_buf(),
                    offset: blob.len() as u64,
                    msg: format!("tensor `{}` needs bytes {start}..{end}, blob is truncated", e.name),
                });
            }
            let bytes = &blob[start..end];
            let data: Vec<f64> = match e.dtype {
                Dtype::F32 => bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let t = Tensor::new(&e.shape, data).map_err(|err| Error::Format {
                file: origin.to_path_buf(),
                offset: e.offset,
                msg: err.to_string(),
            })?;
            Ok((e.name.clone(), t))
        })
        .collect()
}

/// Writes `<stem>.json` + `<stem>.bin` next to each other.
pub fn save_tensors(json_path: &Path, tensors: &[(String, Tensor)], dtype: Dtype) -> Result<()> {
    let blob_path = json_path.with_extension("bin");
    let (blob, entries) = encode(tensors.iter().map(|(n, t)| (n.clone(), t)), dtype);
    std::fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest = TensorManifest {
        blob: blob_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
}

pub fn load_tensors(json_path: &Path) -> Result<Vec<(String, Tensor)>> {
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let manifest: TensorManifest = serde_json::from_str(&text)?;
    let blob_path = json_path.with_file_name(&manifest.blob);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    decode(&blob, &manifest.tensors, &blob_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_layout_is_little_endian_row_major() {
        let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
        let (blob, entries) = encode([("a".to_string(), &t)], Dtype::F32);
        assert_eq!(&blob[0..4], &1.0f32.to_le_bytes());
        assert_eq!(&blob[4..8], &(-2.5f32).to_le_bytes());
        assert_eq!(entries[0].offset, 0);
        assert_eq!(entries[0].shape, vec![2]);
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let t = Tensor::new(&[3], vec![0.1, 1e-300, -7.25]).unwrap();
        let u = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let (blob, entries) = encode([("t".into(), &t), ("u".into(), &u)], Dtype::F64);
        assert_eq!(entries[1].offset, 24);
        let back = decode(&blob, &entries, Path::new("mem")).unwrap();
        assert_eq!(back[0].1, t);
        assert_eq!(back[1].1, u);
    }

    #[test]
    fn truncated_blob_is_reported() {
        let t = Tensor::new(&[4], vec![1.0; 4]).unwrap();
        let (blob, entries) = encode([("t".into(), &t)], Dtype::F32);
        let err = decode(&blob[..10], &entries, Path::new("x.bin")).unwrap_err();
        assert!(err.to_string().contains("x.bin"));
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        let t = Tensor::new(&[2, 2], vec![0.5, 1.5, -2.0, 8.0]).unwrap();
        save_tensors(&path, &[("w".into(), t.clone())], Dtype::F32).unwrap();
        let back = load_tensors(&path).unwrap();
        assert_eq!(back[0].1, t);
    }
}
