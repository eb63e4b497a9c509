//! Little-endian binary container for a network's weight tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      "WSC1"                     4 bytes
//! version    u16 = 1
//! label      u8 (0 = clean, 1 = backdoored)
//! network_id u16 length + UTF-8 bytes
//! metadata   u16 entry count, then per entry u16 key-len + bytes, u16 val-len + bytes
//! tensors    u32 count, then per tensor:
//!              u16 name-len + bytes, u8 dtype (0 = f32, 1 = f64), u8 ndim,
//!              ndim x u64 dims, raw row-major payload
//! ```
//!
//! Metadata is kept in a sorted map so equal records always serialize to
//! identical bytes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"WSC1";
pub const VERSION: u16 = 1;

/// Metadata key that only backdoored records may carry.
pub const POISON_SPEC_KEY: &str = "poison_spec";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Clean,
    Backdoored,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Clean => "clean",
            Label::Backdoored => "backdoored",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Label::Clean),
            "backdoored" => Ok(Label::Backdoored),
            other => Err(Error::validation("label", format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// One named layer's parameters, row-major.
///
/// Values are held as `f64` regardless of `dtype`; an `f32` tensor must only
/// contain values exactly representable in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl WeightTensor {
    /// Builds an `f64` tensor, checking that `data` fills `shape`.
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = WeightTensor {
            name: name.into(),
            dtype: DType::F64,
            shape,
            data,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.is_empty() {
            return Err(Error::validation(
                format!("tensor `{}`.shape", self.name),
                "shape needs at least one dimension",
            ));
        }
        if self.shape.contains(&0) {
            return Err(Error::validation(
                format!("tensor `{}`.shape", self.name),
                "every dimension must be >= 1",
            ));
        }
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::validation(
                format!("tensor `{}`.shape", self.name),
                "more than 255 dimensions",
            ));
        }
        let expected = checked_numel(&self.shape).ok_or_else(|| {
            Error::validation(format!("tensor `{}`.shape", self.name), "element count overflows")
        })?;
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch {
                name: self.name.clone(),
                expected,
                found: self.data.len(),
            });
        }
        if self.dtype == DType::F32 {
            if let Some(v) = self
                .data
                .iter()
                .find(|v| !v.is_nan() && (**v as f32) as f64 != **v)
            {
                return Err(Error::validation(
                    format!("tensor `{}`.data", self.name),
                    format!("value {v} is not representable as f32"),
                ));
            }
        }
        Ok(())
    }
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// A trained network as exchanged between the benchmark and the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkRecord {
    pub network_id: String,
    pub label: Label,
    pub tensors: Vec<WeightTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl NetworkRecord {
    pub fn validate(&self) -> Result<()> {
        if self.tensors.is_empty() {
            return Err(Error::validation("tensors", "tensors non-empty"));
        }
        if self.label == Label::Clean && self.metadata.contains_key(POISON_SPEC_KEY) {
            return Err(Error::validation(
                "metadata",
                format!("clean record must not carry `{POISON_SPEC_KEY}`"),
            ));
        }
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::validation(
                    "tensors",
                    format!("duplicate tensor name `{}`", t.name),
                ));
            }
            t.validate()?;
        }
        Ok(())
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.tensors.iter().map(|t| t.name.clone()).collect()
    }

    /// Looks up a layer by name.
    pub fn select_layer(&self, name: &str) -> Result<&WeightTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownLayer {
                name: name.to_string(),
                available: self.layer_names(),
            })
    }
}

/// Free-function form of [`NetworkRecord::select_layer`].
pub fn select_layer<'a>(record: &'a NetworkRecord, name: &str) -> Result<&'a WeightTensor> {
    record.select_layer(name)
}

pub fn encode(record: &NetworkRecord) -> Result<Vec<u8>> {
    record.validate()?;
    let payload: usize = record
        .tensors
        .iter()
        .map(|t| t.numel() * t.dtype.width())
        .sum();
    let mut out = Vec::with_capacity(64 + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match record.label {
        Label::Clean => 0,
        Label::Backdoored => 1,
    });
    put_str(&mut out, "network_id", &record.network_id)?;
    put_len_u16(&mut out, "metadata", record.metadata.len())?;
    for (k, v) in &record.metadata {
        put_str(&mut out, "metadata key", k)?;
        put_str(&mut out, &format!("metadata[{k}]"), v)?;
    }
    let count = u32::try_from(record.tensors.len())
        .map_err(|_| Error::validation("tensors", "more than u32::MAX tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in &record.tensors {
        put_str(&mut out, "tensor name", &t.name)?;
        out.push(t.dtype.code());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match t.dtype {
            DType::F64 => t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t
                .data
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

fn put_len_u16(out: &mut Vec<u8>, field: &str, len: usize) -> Result<()> {
    let len = u16::try_from(len)
        .map_err(|_| Error::validation(field, format!("length {len} exceeds u16::MAX")))?;
    out.extend_from_slice(&len.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, field: &str, s: &str) -> Result<()> {
    put_len_u16(out, field, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::TruncatedPayload(format!(
                    "needed {n} bytes for {what} at offset {}, {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::validation(what, "not valid UTF-8"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NetworkRecord> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let label = match c.u8("label")? {
        0 => Label::Clean,
        1 => Label::Backdoored,
        other => return Err(Error::validation("label", format!("unknown label code {other}"))),
    };
    let network_id = c.string("network_id")?;
    let n_meta = c.u16("metadata count")?;
    let mut metadata = BTreeMap::new();
    for _ in 0..n_meta {
        let k = c.string("metadata key")?;
        let v = c.string("metadata value")?;
        metadata.insert(k, v);
    }
    let n_tensors = c.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..n_tensors {
        let name = c.string("tensor name")?;
        let dtype = match c.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F64,
            other => {
                return Err(Error::validation(
                    format!("tensor `{name}`.dtype"),
                    format!("unknown dtype code {other}"),
                ))
            }
        };
        let ndim = c.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = c.u64("dims")?;
            shape.push(usize::try_from(d).map_err(|_| {
                Error::validation(format!("tensor `{name}`.shape"), "dimension exceeds usize")
            })?);
        }
        let numel = checked_numel(&shape).ok_or_else(|| {
            Error::validation(format!("tensor `{name}`.shape"), "element count overflows")
        })?;
        let raw = c.take(numel.saturating_mul(dtype.width()), "tensor payload")?;
        let data = match dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        };
        tensors.push(WeightTensor {
            name,
            dtype,
            shape,
            data,
        });
    }
    if c.pos != bytes.len() {
        let last = tensors.last().map(|t| t.name.clone()).unwrap_or_default();
        let width = tensors.last().map(|t| t.dtype.width()).unwrap_or(1);
        let expected = tensors.last().map(|t| t.numel()).unwrap_or(0);
        return Err(Error::ShapeMismatch {
            name: last,
            expected,
            found: expected + (bytes.len() - c.pos) / width,
        });
    }
    let record = NetworkRecord {
        network_id,
        label,
        tensors,
        metadata,
    };
    record.validate()?;
    Ok(record)
}

pub fn write_container(path: impl AsRef<Path>, record: &NetworkRecord) -> Result<()> {
    let bytes = encode(record)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<NetworkRecord> {
    decode(&fs::read(path)?)
}
