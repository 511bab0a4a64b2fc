//! Raw float32 little-endian tensor files with a JSON sidecar header.
//!
//! A tensor `name.f32` is always accompanied by `name.json` describing
//! `{"dtype": "f32", "shape": [...], "layout": "row-major"}`. The format has
//! no magic numbers or framework baggage; any language reads it in a few
//! lines.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub layout: String,
}

impl TensorHeader {
    pub fn new(shape: &[usize]) -> Self {
        TensorHeader {
            dtype: "f32".to_string(),
            shape: shape.to_vec(),
            layout: "row-major".to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write values (narrowed to f32) plus the sidecar header.
pub fn write_tensor(path: &Path, shape: &[usize], values: &[f64]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if values.len() != expected {
        return Err(Error::Dimension(format!(
            "tensor {} has {} values but shape {:?} implies {}",
            path.display(),
            values.len(),
            shape,
            expected
        )));
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let header = TensorHeader::new(shape);
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::parse(sidecar(path), e.to_string()))?;
    std::fs::write(sidecar(path), json).map_err(|e| Error::io(sidecar(path), e))
}

/// Read a tensor and its header; values are widened to f64 exactly.
pub fn read_tensor(path: &Path) -> Result<(TensorHeader, Vec<f64>)> {
    let header_path = sidecar(path);
    let text = std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: TensorHeader = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&header_path, e.to_string()))?;
    if header.dtype != "f32" {
        return Err(Error::parse(
            &header_path,
            format!("unsupported dtype {:?} (only f32)", header.dtype),
        ));
    }
    if header.layout != "row-major" {
        return Err(Error::parse(
            &header_path,
            format!("unsupported layout {:?} (only row-major)", header.layout),
        ));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.len() * 4 {
        return Err(Error::parse(
            path,
            format!(
                "payload is {} bytes but shape {:?} implies {}",
                bytes.len(),
                header.shape,
                header.len() * 4
            ),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((header, values))
}

/// Read a tensor and insist on an exact shape.
pub fn read_tensor_expect(path: &Path, shape: &[usize]) -> Result<Vec<f64>> {
    let (header, values) = read_tensor(path)?;
    if header.shape != shape {
        return Err(Error::parse(
            path,
            format!("expected shape {:?}, file has {:?}", shape, header.shape),
        ));
    }
    Ok(values)
}
