//! Checkpoint storage in the flat "safetensors" layout.
//!
//! A file is an 8-byte little-endian header length `N`, then `N` bytes of
//! UTF-8 JSON describing every tensor (`dtype`, `shape`, `data_offsets`) plus
//! an optional `__metadata__` string map, then the raw row-major
//! little-endian data region. Offsets are relative to the start of the data
//! region and must tile it exactly.
//!
//! Tensors are held in 32-bit working precision whatever their storage
//! dtype; the storage dtype is remembered so that `DtypePolicy::Preserve`
//! can write it back.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
const HEADER_ALIGN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F64,
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Dtype::F64 => "F64",
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "F64" => Some(Dtype::F64),
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }

    fn encode_into(self, values: &[f32], out: &mut Vec<u8>) {
        out.reserve(values.len() * self.width());
        match self {
            Dtype::F64 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f64).to_le_bytes())),
            Dtype::F32 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            // half's conversions round to nearest, ties to even.
            Dtype::F16 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&half::f16::from_f32(v).to_le_bytes())),
            Dtype::BF16 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&half::bf16::from_f32(v).to_le_bytes())),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Header entry for one tensor, as found in a file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub byte_range: Range<usize>,
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A dense tensor in working precision, tagged with the dtype it was stored as.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    dtype: Dtype,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::with_dtype(shape, data, Dtype::F32)
    }

    pub fn with_dtype(shape: Vec<usize>, data: Vec<f32>, dtype: Dtype) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, dtype })
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            dtype: Dtype::F32,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            dtype: Dtype::F32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Same shape and storage dtype, new values.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            dtype: self.dtype,
        }
    }

    pub(crate) fn with_data(&self, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data,
            dtype: self.dtype,
        }
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// A checkpoint: parameter name to tensor, plus the file's free-form metadata.
///
/// Keys are kept sorted, which fixes the accumulation order of every
/// reduction over the map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensorMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl NamedTensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Self {
        self.insert(name, tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        NamedTensorMap {
            tensors,
            metadata: BTreeMap::new(),
        }
    }

    pub fn original_dtype(&self, name: &str) -> Option<Dtype> {
        self.tensors.get(name).map(Tensor::dtype)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and f32 values in sorted key order.
    ///
    /// Storage dtype and metadata do not participate.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.tensors {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((tensor.shape.len() as u64).to_le_bytes());
            for &dim in &tensor.shape {
                hasher.update((dim as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(tensor.data.len() * 4);
            Dtype::F32.encode_into(&tensor.data, &mut buf);
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    /// Bitwise equality of names, shapes and values (NaN payloads included).
    pub fn bit_eq(&self, other: &NamedTensorMap) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape == b.shape
                    && a.data
                        .iter()
                        .zip(&b.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Accept NaN/Inf values instead of failing.
    pub permissive: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtypePolicy {
    /// Write every tensor back in its original storage dtype.
    Preserve,
    #[default]
    ForceF32,
}

pub fn read_checkpoint(path: impl AsRef<Path>, opts: LoadOptions) -> Result<NamedTensorMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let map = from_bytes(&bytes, opts)?;
    log::debug!("read {} tensors from {}", map.len(), path.display());
    Ok(map)
}

/// Parse the header only.
pub fn parse_header(bytes: &[u8]) -> Result<(Vec<TensorMeta>, BTreeMap<String, String>, usize)> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedHeader {
            declared: 8,
            available: bytes.len() as u64,
        });
    }
    let declared = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let available = (bytes.len() - 8) as u64;
    if declared > available {
        return Err(Error::TruncatedHeader {
            declared,
            available,
        });
    }
    let header_end = 8 + declared as usize;
    let text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;

    let entries = parse_header_entries(text)?;
    let mut metadata = BTreeMap::new();
    let mut metas = Vec::with_capacity(entries.len());
    let mut seen = std::collections::HashSet::new();
    for (name, value) in entries {
        if !seen.insert(name.clone()) {
            return Err(Error::MalformedHeader(format!("duplicate key {name:?}")));
        }
        if name == METADATA_KEY {
            metadata = parse_metadata(value)?;
            continue;
        }
        metas.push(parse_meta(name, value)?);
    }

    let data_len = bytes.len() - header_end;
    check_partition(&mut metas, data_len)?;
    Ok((metas, metadata, header_end))
}

pub fn from_bytes(bytes: &[u8], opts: LoadOptions) -> Result<NamedTensorMap> {
    let (metas, metadata, data_start) = parse_header(bytes)?;
    let data = &bytes[data_start..];

    let tensors = metas
        .into_par_iter()
        .map(|meta| {
            let values = meta.dtype.decode(&data[meta.byte_range.clone()]);
            let tensor = Tensor {
                shape: meta.shape,
                data: values,
                dtype: meta.dtype,
            };
            if !opts.permissive {
                if let Some(index) = tensor.first_non_finite() {
                    return Err(Error::NonFinite {
                        name: meta.name,
                        index,
                    });
                }
            }
            Ok((meta.name, tensor))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(NamedTensorMap {
        tensors: tensors.into_iter().collect(),
        metadata,
    })
}

/// Serialize to the flat layout. Data is laid out in sorted key order.
pub fn to_bytes(map: &NamedTensorMap, policy: DtypePolicy) -> Result<Vec<u8>> {
    if map.is_empty() {
        return Err(Error::Empty("cannot write a checkpoint with no tensors"));
    }

    let encoded: Vec<(&str, Dtype, &[usize], Vec<u8>)> = map
        .tensors
        .par_iter()
        .map(|(name, tensor)| {
            let dtype = match policy {
                DtypePolicy::Preserve => tensor.dtype,
                DtypePolicy::ForceF32 => Dtype::F32,
            };
            let numel: usize = tensor.shape.iter().product();
            if numel != tensor.data.len() {
                return Err(Error::Shape(format!(
                    "tensor {name:?}: shape {:?} but {} values",
                    tensor.shape,
                    tensor.data.len()
                )));
            }
            let mut buf = Vec::new();
            dtype.encode_into(&tensor.data, &mut buf);
            Ok((name.as_str(), dtype, tensor.shape.as_slice(), buf))
        })
        .collect::<Result<_>>()?;

    let mut header = serde_json::Map::new();
    if !map.metadata.is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(&map.metadata)?,
        );
    }
    let mut offset = 0usize;
    for (name, dtype, shape, buf) in &encoded {
        let end = offset + buf.len();
        header.insert(
            name.to_string(),
            serde_json::json!({
                "dtype": dtype.tag(),
                "shape": shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }

    let mut header_bytes = serde_json::to_vec(&header)?;
    let padded = header_bytes.len().div_ceil(HEADER_ALIGN) * HEADER_ALIGN;
    header_bytes.resize(padded, b' ');

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, _, _, buf) in encoded {
        out.extend_from_slice(&buf);
    }
    Ok(out)
}

/// Write atomically (temp file in the target directory, then rename).
pub fn write_checkpoint(
    map: &NamedTensorMap,
    path: impl AsRef<Path>,
    policy: DtypePolicy,
) -> Result<PathBuf> {
    let path = path.as_ref();
    let bytes = to_bytes(map, policy)?;
    write_atomic(path, &bytes)?;
    log::debug!("wrote {} tensors to {}", map.len(), path.display());
    Ok(path.to_path_buf())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(std::fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ShapeMismatch {
    pub name: String,
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CompatibilityReport {
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
    pub shape_mismatches: Vec<ShapeMismatch>,
}

impl CompatibilityReport {
    pub fn is_compatible(&self) -> bool {
        self.only_in_a.is_empty() && self.only_in_b.is_empty() && self.shape_mismatches.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_compatible() {
            Ok(())
        } else {
            Err(Error::Incompatible(self))
        }
    }
}

impl fmt::Display for CompatibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_compatible() {
            return f.write_str("compatible");
        }
        let mut parts = Vec::new();
        if !self.only_in_a.is_empty() {
            parts.push(format!("only in first: {:?}", self.only_in_a));
        }
        if !self.only_in_b.is_empty() {
            parts.push(format!("only in second: {:?}", self.only_in_b));
        }
        for m in &self.shape_mismatches {
            parts.push(format!("{:?} shape {:?} vs {:?}", m.name, m.a, m.b));
        }
        f.write_str(&parts.join("; "))
    }
}

pub fn validate_compatibility(a: &NamedTensorMap, b: &NamedTensorMap) -> CompatibilityReport {
    compare_shapes(
        a.iter().map(|(k, t)| (k, t.shape())),
        |k| b.get(k).map(Tensor::shape),
        b.keys().filter(|k| !a.contains(k)),
    )
}

pub(crate) fn compare_shapes<'a>(
    a: impl Iterator<Item = (&'a str, &'a [usize])>,
    b_lookup: impl Fn(&str) -> Option<&'a [usize]>,
    b_only: impl Iterator<Item = &'a str>,
) -> CompatibilityReport {
    let mut report = CompatibilityReport::default();
    for (name, shape_a) in a {
        match b_lookup(name) {
            None => report.only_in_a.push(name.to_string()),
            Some(shape_b) if shape_a != shape_b => report.shape_mismatches.push(ShapeMismatch {
                name: name.to_string(),
                a: shape_a.to_vec(),
                b: shape_b.to_vec(),
            }),
            Some(_) => {}
        }
    }
    report.only_in_b = b_only.map(str::to_string).collect();
    report
}

// --- header parsing -------------------------------------------------------

/// Header object as an ordered list of pairs so duplicate keys are visible.
struct HeaderEntries(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut access: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = access.next_entry::<String, serde_json::Value>()? {
                    out.push(entry);
                }
                Ok(HeaderEntries(out))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

fn parse_header_entries(text: &str) -> Result<Vec<(String, serde_json::Value)>> {
    let trimmed = text.trim_end_matches(' ');
    serde_json::from_str::<HeaderEntries>(trimmed)
        .map(|h| h.0)
        .map_err(|e| Error::MalformedHeader(e.to_string()))
}

fn parse_metadata(value: serde_json::Value) -> Result<BTreeMap<String, String>> {
    serde_json::from_value(value)
        .map_err(|e| Error::MalformedHeader(format!("{METADATA_KEY} must map text to text: {e}")))
}

fn parse_meta(name: String, value: serde_json::Value) -> Result<TensorMeta> {
    if name.is_empty() {
        return Err(Error::BadLayout {
            name,
            reason: "empty tensor name".into(),
        });
    }
    let bad = |reason: &str| Error::MalformedHeader(format!("tensor {name:?}: {reason}"));
    let obj = value.as_object().ok_or_else(|| bad("entry is not an object"))?;

    let tag = obj
        .get("dtype")
        .and_then(|v| v.as_str())
        .ok_or_else(|| bad("missing text field \"dtype\""))?;
    let dtype = Dtype::from_tag(tag).ok_or_else(|| Error::UnknownDtype {
        name: name.clone(),
        tag: tag.to_string(),
    })?;

    let shape = obj
        .get("shape")
        .and_then(|v| v.as_array())
        .ok_or_else(|| bad("missing array field \"shape\""))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape entries must be non-negative integers"))?;

    let offsets = obj
        .get("data_offsets")
        .and_then(|v| v.as_array())
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
        .ok_or_else(|| bad("\"data_offsets\" must be [begin, end]"))?;
    let (begin, end) = offsets;
    if end < begin {
        return Err(Error::BadLayout {
            name,
            reason: format!("data_offsets end {end} precedes begin {begin}"),
        });
    }

    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("element count overflows"))?;
    let expected = numel.checked_mul(dtype.width());
    if expected != Some(end - begin) {
        return Err(Error::BadLayout {
            name,
            reason: format!(
                "byte range {begin}..{end} holds {} bytes, shape {shape:?} of {dtype} needs {}",
                end - begin,
                numel.saturating_mul(dtype.width())
            ),
        });
    }

    Ok(TensorMeta {
        name,
        dtype,
        shape,
        byte_range: begin..end,
    })
}

/// Byte ranges must tile `[0, data_len)` with no gap or overlap.
fn check_partition(metas: &mut [TensorMeta], data_len: usize) -> Result<()> {
    metas.sort_by(|a, b| {
        (a.byte_range.start, a.byte_range.end).cmp(&(b.byte_range.start, b.byte_range.end))
    });
    let mut cursor = 0usize;
    let mut prev: Option<&str> = None;
    for meta in metas.iter() {
        let Range { start, end } = meta.byte_range;
        if start < cursor {
            return Err(Error::BadLayout {
                name: meta.name.clone(),
                reason: format!(
                    "byte range {start}..{end} overlaps {:?}",
                    prev.unwrap_or_default()
                ),
            });
        }
        if start > cursor {
            return Err(Error::BadLayout {
                name: meta.name.clone(),
                reason: format!("byte range {start}..{end} leaves a gap after offset {cursor}"),
            });
        }
        cursor = end;
        prev = Some(&meta.name);
    }
    if cursor != data_len {
        let name = metas.last().map(|m| m.name.clone()).unwrap_or_default();
        return Err(Error::BadLayout {
            name,
            reason: format!("data region is {data_len} bytes but tensors cover {cursor}"),
        });
    }
    Ok(())
}
