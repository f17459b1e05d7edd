//! Tensor dump format: a raw little-endian `f64` payload (`<prefix>.bin`,
//! row-major, tensors concatenated in header order) next to a line-oriented
//! text sidecar (`<prefix>.meta`) naming each tensor and its shape.
//!
//! The payload is written byte-exactly from the in-memory values, so dumps
//! of deterministic runs compare equal with `cmp`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const FORMAT_TAG: &str = "tensor-dump-v1";
const DTYPE_TAG: &str = "f64le";

/// Name and shape of one tensor in a dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorMeta {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sidecar contents: provenance fields plus the tensor directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpHeader {
    pub seed: u64,
    pub iter: u64,
    pub tensors: Vec<TensorMeta>,
}

pub fn bin_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("bin")
}

pub fn meta_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("meta")
}

/// Write `tensors` (name, shape, values) under `<prefix>.bin/.meta`.
pub fn write_dump(prefix: &Path, seed: u64, iter: u64, tensors: &[(&str, Vec<usize>, &[f64])]) -> Result<()> {
    let mut meta = String::new();
    meta.push_str(&format!("format: {FORMAT_TAG}\n"));
    meta.push_str(&format!("dtype: {DTYPE_TAG}\n"));
    meta.push_str(&format!("seed: {seed}\n"));
    meta.push_str(&format!("iter: {iter}\n"));

    let mut payload: Vec<u8> = Vec::new();
    for (name, shape, values) in tensors {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::Shape(format!(
                "tensor {name}: shape {shape:?} holds {expect} values, got {}",
                values.len()
            )));
        }
        let shape_str: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        meta.push_str(&format!("tensor: {name} shape={}\n", shape_str.join("x")));
        for v in *values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut f = fs::File::create(meta_path(prefix))?;
    f.write_all(meta.as_bytes())?;
    let mut f = fs::File::create(bin_path(prefix))?;
    f.write_all(&payload)?;
    Ok(())
}

/// Read a dump written by [`write_dump`].
pub fn read_dump(prefix: &Path) -> Result<(DumpHeader, Vec<Vec<f64>>)> {
    let meta_text = fs::read_to_string(meta_path(prefix))?;
    let mut seed = None;
    let mut iter = None;
    let mut tensors = Vec::new();
    for (lineno, line) in meta_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("meta line {} has no colon: {line}", lineno + 1)))?;
        let value = value.trim();
        match key.trim() {
            "format" => {
                if value != FORMAT_TAG {
                    return Err(Error::Invalid(format!("unknown dump format {value}")));
                }
            }
            "dtype" => {
                if value != DTYPE_TAG {
                    return Err(Error::Invalid(format!("unknown dtype {value}")));
                }
            }
            "seed" => seed = Some(value.parse::<u64>().map_err(|e| Error::Invalid(e.to_string()))?),
            "iter" => iter = Some(value.parse::<u64>().map_err(|e| Error::Invalid(e.to_string()))?),
            "tensor" => {
                let (name, shape_part) = value
                    .split_once(" shape=")
                    .ok_or_else(|| Error::Invalid(format!("bad tensor line: {line}")))?;
                let shape: Vec<usize> = shape_part
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|e| Error::Invalid(e.to_string())))
                    .collect::<Result<_>>()?;
                tensors.push(TensorMeta { name: name.trim().to_string(), shape });
            }
            other => return Err(Error::Invalid(format!("unknown meta key {other}"))),
        }
    }
    let header = DumpHeader {
        seed: seed.ok_or_else(|| Error::Invalid("meta missing seed".into()))?,
        iter: iter.ok_or_else(|| Error::Invalid("meta missing iter".into()))?,
        tensors,
    };

    let bytes = fs::read(bin_path(prefix))?;
    let total: usize = header.tensors.iter().map(|t| t.len()).sum();
    if bytes.len() != total * 8 {
        return Err(Error::Shape(format!(
            "payload holds {} bytes, directory expects {}",
            bytes.len(),
            total * 8
        )));
    }
    let mut values = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for t in &header.tensors {
        let mut tensor = Vec::with_capacity(t.len());
        for _ in 0..t.len() {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&bytes[offset..offset + 8]);
            tensor.push(f64::from_le_bytes(buf));
            offset += 8;
        }
        values.push(tensor);
    }
    Ok((header, values))
}
