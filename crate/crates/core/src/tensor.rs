//! Dense row-major matrices and the safetensors container.
//!
//! Every weight, activation batch, score matrix and mask export flows
//! through [`Tensor2D`]. [`TensorFile`] reads and writes the safetensors
//! layout: an 8-byte little-endian header length, a JSON header, then a
//! contiguous little-endian payload. Writing always emits `F32`; reading
//! accepts `F32`, `F16` and `BF16` (half types are widened).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Shape(format!("{rows}x{cols} overflows")))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} elements, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = vec![0.0f32; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor2D {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Returns the index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn scaled(&self, factor: f32) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vconcat(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.cols {
            return Err(Error::dim(format!(
                "vconcat: {} columns vs {} columns",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor2D {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self · rhs`, accumulating each dot product in `f64`.
    ///
    /// Rows of the output are computed independently; the summation order
    /// inside each element is fixed, so results do not depend on how rows
    /// are scheduled across threads.
    pub fn matmul(&self, rhs: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != rhs.rows {
            return Err(Error::dim(format!(
                "matmul: lhs is {}x{}, rhs is {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let n = rhs.cols;
        let mut out = vec![0.0f32; self.rows * n];
        if n == 0 {
            return Tensor2D::new(self.rows, 0, out);
        }
        out.par_chunks_mut(n).enumerate().for_each(|(r, out_row)| {
            let mut acc = vec![0.0f64; n];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let a = a as f64;
                for (dst, &b) in acc.iter_mut().zip(rhs.row(k)) {
                    *dst += a * b as f64;
                }
            }
            for (o, a) in out_row.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        });
        Tensor2D::new(self.rows, n, out)
    }

    /// Frobenius norm computed in `f64`.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

// ---------------------------------------------------------------------------
// safetensors container
// ---------------------------------------------------------------------------

const METADATA_KEY: &str = "__metadata__";

/// Named collection of matrices backed by a safetensors file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    entries: BTreeMap<String, Tensor2D>,
    metadata: Option<BTreeMap<String, String>>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor2D) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Format("tensor names must be non-empty".into()));
        }
        if name == METADATA_KEY {
            return Err(Error::Format(format!("'{METADATA_KEY}' is reserved")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2D> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor2D> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, Tensor2D> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata
            .get_or_insert_with(BTreeMap::new)
            .insert(key.into(), value.into());
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Serializes to safetensors bytes. Tensors are laid out in name order,
    /// so identical contents always produce identical bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        if let Some(meta) = &self.metadata {
            let meta: Map<String, Value> = meta
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        }
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            let len = t.data.len() * 4;
            let mut info = Map::new();
            info.insert("dtype".into(), Value::from("F32"));
            info.insert("shape".into(), Value::from(vec![t.rows, t.cols]));
            info.insert(
                "data_offsets".into(),
                Value::from(vec![offset, offset + len]),
            );
            header.insert(name.clone(), Value::Object(info));
            offset += len;
        }
        let mut json = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
        // Pad with spaces so the payload starts 8-byte aligned.
        while !json.len().is_multiple_of(8) {
            json.push(b' ');
        }

        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.entries.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format(format!(
                "file is {} bytes, shorter than the 8-byte header length field",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(Error::Format(format!(
                "header length {header_len} exceeds remaining {available} bytes"
            )));
        }
        let header_end = 8 + header_len as usize;
        let header: Value = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
        let Value::Object(header) = header else {
            return Err(Error::Format("header must be a JSON object".into()));
        };
        let buffer = &bytes[header_end..];

        let mut file = TensorFile::new();
        let mut spans: Vec<(usize, usize, String)> = Vec::new();
        for (name, info) in &header {
            if name == METADATA_KEY {
                file.metadata = Some(parse_metadata(info)?);
                continue;
            }
            if name.is_empty() {
                return Err(Error::Format("empty tensor name".into()));
            }
            let decl = TensorDecl::parse(name, info)?;
            if decl.end > buffer.len() {
                return Err(Error::Format(format!(
                    "tensor '{name}': data_offsets [{}, {}] outside the {}-byte payload",
                    decl.begin,
                    decl.end,
                    buffer.len()
                )));
            }
            spans.push((decl.begin, decl.end, name.clone()));
            let tensor = decl.decode(name, &buffer[decl.begin..decl.end])?;
            file.entries.insert(name.clone(), tensor);
        }

        spans.sort();
        for pair in spans.windows(2) {
            let (_, prev_end, ref prev) = pair[0];
            let (begin, _, ref next) = pair[1];
            if begin < prev_end {
                return Err(Error::Format(format!(
                    "data_offsets of '{prev}' and '{next}' overlap"
                )));
            }
        }
        Ok(file)
    }
}

fn parse_metadata(info: &Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = info else {
        return Err(Error::Format("__metadata__ must be an object".into()));
    };
    map.iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k.clone(), s.clone())),
            _ => Err(Error::Format(format!(
                "__metadata__ value for '{k}' must be a string"
            ))),
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }
}

struct TensorDecl {
    dtype: Dtype,
    rows: usize,
    cols: usize,
    begin: usize,
    end: usize,
}

impl TensorDecl {
    fn parse(name: &str, info: &Value) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("tensor '{name}': {what}"));
        let obj = info
            .as_object()
            .ok_or_else(|| bad("entry is not an object"))?;

        let dtype_str = obj
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing dtype"))?;
        let dtype = match dtype_str {
            "F32" => Dtype::F32,
            "F16" => Dtype::F16,
            "BF16" => Dtype::BF16,
            other => {
                return Err(Error::UnsupportedDtype {
                    tensor: name.to_string(),
                    dtype: other.to_string(),
                })
            }
        };

        let shape = obj
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing shape"))?
            .iter()
            .map(|d| d.as_u64().map(|d| d as usize))
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| bad("shape entries must be non-negative integers"))?;
        let (rows, cols) = match shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::UnsupportedShape {
                    tensor: name.to_string(),
                    shape,
                })
            }
        };

        let offsets = obj
            .get("data_offsets")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing data_offsets"))?;
        let (begin, end) = match offsets.as_slice() {
            [b, e] => (
                b.as_u64().ok_or_else(|| bad("bad data_offsets"))?,
                e.as_u64().ok_or_else(|| bad("bad data_offsets"))?,
            ),
            _ => return Err(bad("data_offsets must have two entries")),
        };
        if begin > end {
            return Err(bad("data_offsets begin after end"));
        }
        let (begin, end) = (
            usize::try_from(begin).map_err(|_| bad("data_offsets too large"))?,
            usize::try_from(end).map_err(|_| bad("data_offsets too large"))?,
        );
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| bad("shape overflows"))?;
        if end - begin != expected {
            return Err(bad(&format!(
                "shape {shape:?} needs {expected} bytes, data_offsets span {}",
                end - begin
            )));
        }
        Ok(Self {
            dtype,
            rows,
            cols,
            begin,
            end,
        })
    }

    fn decode(&self, name: &str, raw: &[u8]) -> Result<Tensor2D> {
        let data: Vec<f32> = match self.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            Dtype::BF16 => raw
                .chunks_exact(2)
                .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
        };
        let tensor = Tensor2D::new(self.rows, self.cols, data)?;
        if let Some(i) = tensor.first_non_finite() {
            return Err(Error::Data {
                tensor: name.to_string(),
                reason: format!("non-finite value at flat index {i}"),
            });
        }
        Ok(tensor)
    }
}
