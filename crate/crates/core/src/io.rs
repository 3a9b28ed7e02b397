//! On-disk formats.
//!
//! * Volumes and other dense arrays: raw little-endian `f32` plus a JSON
//!   sidecar `{"dims": [...], "spacing_mm": [x, y, z]}`. The raw file sits
//!   next to the sidecar with the same stem and a `.raw` extension.
//! * Masks: binary 8-bit PGM (`P5`), 255 for set pixels.
//! * Fusion parameters: a flat little-endian `f64` blob and a JSON manifest
//!   `{"dtype": "f64le", "tensors": [{"name", "shape", "offset"}]}` where
//!   `offset` is in bytes.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::Volume;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Sidecar header of a raw array file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm: Option<[f64; 3]>,
}

/// Path of the raw payload belonging to a sidecar header.
pub fn raw_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

/// Writes `data` (row-major) as `<stem>.raw` plus the `<stem>.json` header.
pub fn write_raw_f32<T: Scalar>(header_path: &Path, header: &RawHeader, data: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let mut bytes = Vec::new();
    for v in data {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let expected: usize = header.dims.iter().product();
    if bytes.len() != expected * 4 {
        return Err(format_err(header_path, format!("{} values for dims {:?}", bytes.len() / 4, header.dims)));
    }
    let json = serde_json::to_string_pretty(header).expect("header serializes");
    write(header_path, format!("{json}\n").as_bytes())?;
    write(&raw_path(header_path), &bytes)
}

pub fn read_raw_f32(header_path: &Path) -> Result<(RawHeader, ArrayD<f64>), IoError> {
    let text = read(header_path)?;
    let header: RawHeader = serde_json::from_slice(&text).map_err(|e| format_err(header_path, e.to_string()))?;
    let raw = raw_path(header_path);
    let bytes = read(&raw)?;
    let count: usize = header.dims.iter().product();
    if bytes.len() != count * 4 {
        return Err(format_err(&raw, format!("{} bytes, expected {}", bytes.len(), count * 4)));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let arr = ArrayD::from_shape_vec(IxDyn(&header.dims), data).map_err(|e| format_err(&raw, e.to_string()))?;
    Ok((header, arr))
}

pub fn write_volume<T: Scalar>(header_path: &Path, vol: &Volume<T>) -> Result<(), IoError> {
    let (s, h, w) = vol.dims();
    let header = RawHeader {
        dims: vec![s, h, w],
        spacing_mm: Some(vol.spacing_mm().map(|v| v.as_f64())),
    };
    write_raw_f32(header_path, &header, vol.voxels().iter().copied())
}

pub fn read_volume(header_path: &Path) -> Result<Volume<f64>, IoError> {
    let (header, arr) = read_raw_f32(header_path)?;
    let spacing = header
        .spacing_mm
        .ok_or_else(|| format_err(header_path, "volume header needs spacing_mm"))?;
    let voxels: Array3<f64> = arr
        .into_dimensionality()
        .map_err(|_| format_err(header_path, format!("volume dims must have 3 entries, got {:?}", header.dims)))?;
    Volume::new(voxels, spacing).map_err(|e| format_err(header_path, e.to_string()))
}

/// Binary PGM, 255 where the mask is set.
pub fn write_pgm(path: &Path, mask: &Array2<bool>) -> Result<(), IoError> {
    let (h, w) = mask.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    write(path, &bytes)
}

pub fn read_pgm(path: &Path) -> Result<Array2<u8>, IoError> {
    let bytes = read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(format_err(path, "expected 8-bit binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, "bad PGM size"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let payload = bytes.get(pos..pos + w * h).ok_or_else(|| format_err(path, "truncated PGM payload"))?;
    Ok(Array2::from_shape_vec((h, w), payload.to_vec()).expect("length checked"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// Flattens named tensors into a blob and its manifest.
pub fn pack_params<T: Scalar>(named: &[(String, ArrayD<T>)]) -> (Vec<u8>, ParamManifest) {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.iter() {
            blob.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    (
        blob,
        ParamManifest {
            dtype: "f64le".into(),
            tensors,
        },
    )
}

pub fn unpack_params(blob: &[u8], manifest: &ParamManifest) -> Result<Vec<(String, ArrayD<f64>)>, String> {
    if manifest.dtype != "f64le" {
        return Err(format!("unsupported dtype {}", manifest.dtype));
    }
    manifest
        .tensors
        .iter()
        .map(|e| {
            let count: usize = e.shape.iter().product();
            let bytes = blob
                .get(e.offset..e.offset + count * 8)
                .ok_or_else(|| format!("tensor `{}` runs past the blob", e.name))?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|err| err.to_string())?;
            Ok((e.name.clone(), arr))
        })
        .collect()
}

/// Writes `params.bin` and `params.json` into `dir`.
pub fn write_params<T: Scalar>(dir: &Path, named: &[(String, ArrayD<T>)]) -> Result<(), IoError> {
    let (blob, manifest) = pack_params(named);
    write(&dir.join("params.bin"), &blob)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join("params.json"), format!("{json}\n").as_bytes())
}

pub fn read_params(dir: &Path) -> Result<Vec<(String, ArrayD<f64>)>, IoError> {
    let manifest_path = dir.join("params.json");
    let manifest: ParamManifest =
        serde_json::from_slice(&read(&manifest_path)?).map_err(|e| format_err(&manifest_path, e.to_string()))?;
    let blob_path = dir.join("params.bin");
    unpack_params(&read(&blob_path)?, &manifest).map_err(|m| format_err(&blob_path, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionConfig, FusionParams};

    #[test]
    fn volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.json");
        let voxels = Array3::from_shape_fn((2, 3, 4), |(k, j, i)| (k * 12 + j * 4 + i) as f64 - 1024.0);
        let vol = Volume::new(voxels, [0.8, 0.7, 2.5]).unwrap();
        write_volume(&path, &vol).unwrap();
        assert_eq!(fs::metadata(raw_path(&path)).unwrap().len(), 24 * 4);
        let back = read_volume(&path).unwrap();
        assert_eq!(back.voxels(), vol.voxels());
        let sp = back.spacing_mm();
        assert!((sp[0] - 0.8).abs() < 1e-12 && (sp[2] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Array2::from_shape_fn((3, 5), |(r, c)| (r + c) % 2 == 0);
        write_pgm(&path, &mask).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.mapv(|v| v == 255), mask);
        assert!(fs::read(&path).unwrap().starts_with(b"P5\n5 3\n255\n"));
    }

    #[test]
    fn params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = FusionParams::<f64>::init(&FusionConfig::REDUCED, 4).unwrap();
        write_params(dir.path(), &p.to_named()).unwrap();
        let named = read_params(dir.path()).unwrap();
        assert_eq!(FusionParams::from_named(2, named).unwrap(), p);
        let (_, manifest) = pack_params(&p.to_named());
        assert_eq!(manifest.tensors[1].offset, 8 * 8 * 40);
    }
}
