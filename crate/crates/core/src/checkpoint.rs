//! Checkpoint container I/O and task-vector extraction.
//!
//! On-disk layout (little-endian): an 8-byte header length `H`, then `H`
//! bytes of UTF-8 JSON mapping tensor names to
//! `{"dtype", "shape", "data_offsets"}` plus an optional `__metadata__`
//! string map, then the concatenated row-major tensor buffers. Offsets are
//! relative to the end of the header. The writer sorts names
//! lexicographically and lays buffers out contiguously, so serialization is
//! canonical: equal checkpoints produce identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use half::f16;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F16,
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F16 => "F16",
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    fn parse(name: &str, tag: &str) -> Result<Self> {
        match tag {
            "F16" => Ok(DType::F16),
            "F32" => Ok(DType::F32),
            "F64" => Ok(DType::F64),
            other => Err(Error::UnsupportedDtype {
                name: name.to_string(),
                dtype: other.to_string(),
            }),
        }
    }

    /// Rounds `v` to the nearest value representable in this dtype.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            DType::F16 => f16::from_f64(v).to_f64(),
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            DType::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            DType::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One named tensor. Values are held as `f64` but always rounded to what
/// `dtype` can represent, so a write/read cycle is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::InvalidTensor {
                name: String::new(),
                detail: format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    values.len()
                ),
            });
        }
        let values = values.into_iter().map(|v| dtype.quantize(v)).collect();
        Ok(Self {
            dtype,
            shape,
            values,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Views a 2-D tensor as a matrix.
    pub fn to_matrix(&self) -> Option<Matrix> {
        match self.shape[..] {
            [r, c] if r > 0 && c > 0 => Matrix::new(r, c, self.values.clone()).ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensors in lexicographic name order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let len = t.numel() * t.dtype.size();
            header.insert(
                name.clone(),
                json!({
                    "dtype": t.dtype.as_str(),
                    "shape": t.shape,
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
        }
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.to_string(), json!(self.metadata));
        }
        let header = serde_json::to_string(&Value::Object(header)).expect("header serializes");

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            for &v in &t.values {
                t.dtype.encode(v, &mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedBuffer {
                offset: 0,
                detail: format!(
                    "need 8 bytes for the header length, file has {}",
                    bytes.len()
                ),
            });
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(Error::TruncatedBuffer {
                offset: 8,
                detail: format!("header length {header_len} exceeds remaining {available} bytes"),
            });
        }
        let header_end = 8 + header_len as usize;
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let entries = parse_header_entries(header)?;
        let body = &bytes[header_end..];

        let mut ckpt = Checkpoint::new();
        for (name, entry) in entries {
            if name == METADATA_KEY {
                ckpt.metadata = parse_metadata(entry)?;
                continue;
            }
            let tensor = parse_tensor(&name, &entry, body, header_end as u64)?;
            ckpt.tensors.insert(name, tensor);
        }
        Ok(ckpt)
    }
}

/// Reads a header object, keeping every key so duplicates can be reported.
fn parse_header_entries(header: &str) -> Result<Vec<(String, Value)>> {
    struct Entries;

    impl<'de> Visitor<'de> for Entries {
        type Value = Vec<(String, Value)>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a JSON object")
        }

        fn visit_map<A: MapAccess<'de>>(
            self,
            mut map: A,
        ) -> std::result::Result<Self::Value, A::Error> {
            let mut out = Vec::new();
            while let Some((k, v)) = map.next_entry::<String, Value>()? {
                out.push((k, v));
            }
            Ok(out)
        }
    }

    let mut de = serde_json::Deserializer::from_str(header);
    let entries = de
        .deserialize_map(Entries)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    de.end()
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;

    let mut seen = std::collections::HashSet::new();
    for (k, _) in &entries {
        if !seen.insert(k.as_str()) {
            return Err(Error::DuplicateName(k.clone()));
        }
    }
    Ok(entries)
}

fn parse_metadata(entry: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = entry else {
        return Err(Error::MalformedHeader(
            "__metadata__ must be an object".into(),
        ));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            _ => Err(Error::MalformedHeader(format!(
                "__metadata__ value for `{k}` must be a string"
            ))),
        })
        .collect()
}

fn parse_tensor(name: &str, entry: &Value, body: &[u8], body_start: u64) -> Result<Tensor> {
    let malformed = |detail: &str| Error::MalformedHeader(format!("tensor `{name}`: {detail}"));
    let obj = entry
        .as_object()
        .ok_or_else(|| malformed("entry is not an object"))?;
    let dtype_tag = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string `dtype`"))?;
    let dtype = DType::parse(name, dtype_tag)?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing array `shape`"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed("`shape` must hold non-negative integers"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()?, a[1].as_u64()?)))
        .ok_or_else(|| malformed("`data_offsets` must be two non-negative integers"))?;
    let (begin, end) = offsets;
    if begin > end {
        return Err(malformed("`data_offsets` begin exceeds end"));
    }
    if end > body.len() as u64 {
        return Err(Error::TruncatedBuffer {
            offset: body_start + end,
            detail: format!(
                "tensor `{name}` ends past the data section ({} bytes)",
                body.len()
            ),
        });
    }
    let numel: usize = shape.iter().product();
    let byte_len = (end - begin) as usize;
    if byte_len != numel * dtype.size() {
        return Err(Error::InvalidTensor {
            name: name.to_string(),
            detail: format!(
                "shape {shape:?} as {dtype} needs {} bytes, offsets span {byte_len}",
                numel * dtype.size()
            ),
        });
    }
    let values = dtype.decode(&body[begin as usize..end as usize]);
    Ok(Tensor {
        dtype,
        shape,
        values,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Decides which tensors count as linear layers for iterative merging.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LinearClassifier {
    /// Substrings that exclude a tensor name.
    pub exclude: Vec<String>,
}

impl Default for LinearClassifier {
    fn default() -> Self {
        Self {
            exclude: ["embed", "norm", "ln", "bias"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

impl LinearClassifier {
    pub fn is_linear(&self, name: &str, shape: &[usize]) -> bool {
        matches!(shape, [r, c] if *r >= 2 && *c >= 2)
            && !self.exclude.iter().any(|pat| name.contains(pat.as_str()))
    }
}

/// Linear-layer test with the default exclusion list.
pub fn classify_linear(name: &str, shape: &[usize]) -> bool {
    LinearClassifier::default().is_linear(name, shape)
}

/// Per-tensor difference between a tuned model and its base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub source_id: String,
    pub linear_layers: BTreeMap<String, Matrix>,
    pub residual: BTreeMap<String, Vec<f64>>,
}

impl TaskVector {
    /// Delta values for `name`, regardless of partition.
    pub fn values(&self, name: &str) -> Option<&[f64]> {
        self.linear_layers
            .get(name)
            .map(Matrix::data)
            .or_else(|| self.residual.get(name).map(Vec::as_slice))
    }
}

/// Checks that `other` has exactly the tensor names and shapes of `base`.
pub fn check_aligned(base: &Checkpoint, other: &Checkpoint, other_id: &str) -> Result<()> {
    let mismatch = |tensor: &str, detail: String| Error::Alignment {
        tensor: tensor.to_string(),
        base: "base".to_string(),
        other: other_id.to_string(),
        detail,
    };
    for (name, bt) in base.tensors() {
        let ot = other
            .get(name)
            .ok_or_else(|| mismatch(name, "missing in model".into()))?;
        if ot.shape() != bt.shape() {
            return Err(mismatch(
                name,
                format!("shape {:?} vs {:?}", bt.shape(), ot.shape()),
            ));
        }
    }
    if let Some(extra) = other.names().find(|n| base.get(n).is_none()) {
        return Err(mismatch(extra, "not present in base".into()));
    }
    Ok(())
}

/// `τ_i = θ_i − θ_0` for every tuned model, partitioned into linear layers
/// and residual tensors.
pub fn compute_task_vectors(
    base: &Checkpoint,
    tuned: &[(&str, &Checkpoint)],
    classifier: &LinearClassifier,
) -> Result<Vec<TaskVector>> {
    tuned
        .iter()
        .map(|(id, model)| {
            check_aligned(base, model, id)?;
            let mut tv = TaskVector {
                source_id: id.to_string(),
                linear_layers: BTreeMap::new(),
                residual: BTreeMap::new(),
            };
            for (name, bt) in base.tensors() {
                let ot = model.get(name).expect("aligned");
                let delta: Vec<f64> = ot
                    .values()
                    .iter()
                    .zip(bt.values())
                    .map(|(t, b)| t - b)
                    .collect();
                if classifier.is_linear(name, bt.shape()) {
                    let m = Matrix::new(bt.shape()[0], bt.shape()[1], delta)?;
                    tv.linear_layers.insert(name.to_string(), m);
                } else {
                    tv.residual.insert(name.to_string(), delta);
                }
            }
            Ok(tv)
        })
        .collect()
}
