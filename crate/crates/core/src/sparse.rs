//! Compressed N:M storage and a sparse matrix-vector kernel.
//!
//! Kept values are stored densely in traversal order (group line, then
//! window, then ascending position). Each kept value has a position code
//! inside its window, packed LSB-first: 2 bits for `m <= 4`, 3 bits for
//! `m <= 8`.
//!
//! The index side file (`.nmidx`) is:
//!
//! ```text
//! "NMIX" | n: u32 | m: u32 | rows: u64 | cols: u64 | packed codes
//! ```
//!
//! with all integers little-endian. The group axis lives in the
//! metadata of the values file.

use std::fs;
use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{GroupAxis, SparsityKind, SparsityMask};
use crate::tensor::{Tensor2D, TensorFile};

const MAGIC: &[u8; 4] = b"NMIX";
const INDEX_HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8;
pub const MAX_M: usize = 8;

fn code_bits(m: usize) -> u32 {
    if m <= 4 {
        2
    } else {
        3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmCompressed {
    pub n: usize,
    pub m: usize,
    pub rows: usize,
    pub cols: usize,
    pub axis: GroupAxis,
    values: Vec<f32>,
    codes: Vec<u8>,
}

impl NmCompressed {
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    fn keep_per_window(&self) -> usize {
        self.m - self.n
    }

    fn groups(&self) -> usize {
        match self.axis {
            GroupAxis::PerRow => self.rows,
            GroupAxis::PerColumn => self.cols,
        }
    }

    fn group_len(&self) -> usize {
        match self.axis {
            GroupAxis::PerRow => self.cols,
            GroupAxis::PerColumn => self.rows,
        }
    }

    /// Position code of the `k`-th kept value.
    #[inline]
    pub fn code(&self, k: usize) -> usize {
        let bits = code_bits(self.m) as usize;
        let bit = k * bits;
        let (byte, shift) = (bit / 8, bit % 8);
        let lo = self.codes[byte] as u16;
        let hi = self.codes.get(byte + 1).copied().unwrap_or(0) as u16;
        (((lo | (hi << 8)) >> shift) & ((1 << bits) - 1)) as usize
    }

    pub fn dense_bytes(&self) -> usize {
        self.rows * self.cols * 4
    }

    pub fn compressed_bytes(&self) -> usize {
        self.values.len() * 4 + self.codes.len()
    }

    pub fn decode(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.rows, self.cols);
        let keep = self.keep_per_window();
        let windows = self.group_len() / self.m;
        let mut k = 0;
        for g in 0..self.groups() {
            for w in 0..windows {
                for _ in 0..keep {
                    let pos = w * self.m + self.code(k);
                    match self.axis {
                        GroupAxis::PerRow => out.set(g, pos, self.values[k]),
                        GroupAxis::PerColumn => out.set(pos, g, self.values[k]),
                    }
                    k += 1;
                }
            }
        }
        out
    }

    /// Serializes the index side file.
    pub fn index_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(INDEX_HEADER_LEN + self.codes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.m as u32).to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        out.extend_from_slice(&self.codes);
        out
    }

    /// Writes values to `path` (safetensors) and codes to the sibling
    /// `.nmidx` file. Returns the index path.
    pub fn save(&self, name: &str, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let index_path = path.with_extension("nmidx");
        let mut tf = TensorFile::new();
        tf.insert(
            format!("{name}.nm_values"),
            Tensor2D::new(1, self.values.len(), self.values.clone())?,
        )?;
        let meta = NmMeta {
            n: self.n,
            m: self.m,
            rows: self.rows,
            cols: self.cols,
            axis: self.axis,
            index_file: index_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        tf.set_metadata(
            format!("{name}.nm"),
            serde_json::to_string(&meta).expect("meta"),
        );
        tf.save(path)?;
        fs::write(&index_path, self.index_bytes())?;
        Ok(index_path)
    }

    pub fn load(name: &str, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let tf = TensorFile::load(path)?;
        let meta_json = tf
            .metadata()
            .and_then(|m| m.get(&format!("{name}.nm")))
            .ok_or_else(|| Error::Format(format!("no '{name}.nm' metadata entry")))?;
        let meta: NmMeta = serde_json::from_str(meta_json)
            .map_err(|e| Error::Format(format!("bad '{name}.nm' metadata: {e}")))?;
        let values = tf
            .get(&format!("{name}.nm_values"))
            .ok_or_else(|| Error::Format(format!("missing '{name}.nm_values'")))?
            .data()
            .to_vec();
        let index_path = path.with_file_name(&meta.index_file);
        let index = fs::read(&index_path)?;
        Self::from_parts(&index, meta.axis, values)
    }

    /// Rebuilds from an index side file, its axis and the packed values.
    pub fn from_parts(index: &[u8], axis: GroupAxis, values: Vec<f32>) -> Result<Self> {
        if index.len() < INDEX_HEADER_LEN || &index[..4] != MAGIC {
            return Err(Error::Format("not an NMIX index file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(index[o..o + 4].try_into().unwrap()) as usize;
        let u64_at = |o: usize| u64::from_le_bytes(index[o..o + 8].try_into().unwrap());
        let (n, m) = (u32_at(4), u32_at(8));
        let (rows, cols) = (u64_at(12), u64_at(20));
        if n == 0 || n >= m || m > MAX_M {
            return Err(Error::Format(format!("invalid pattern {n}:{m}")));
        }
        let (rows, cols) = (
            usize::try_from(rows).map_err(|_| Error::Format("rows too large".into()))?,
            usize::try_from(cols).map_err(|_| Error::Format("cols too large".into()))?,
        );
        let len = match axis {
            GroupAxis::PerRow => cols,
            GroupAxis::PerColumn => rows,
        };
        if len % m != 0 {
            return Err(Error::Format(format!(
                "group length {len} not a multiple of {m}"
            )));
        }
        let kept = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("shape overflows".into()))?
            / m
            * (m - n);
        if values.len() != kept {
            return Err(Error::Format(format!(
                "expected {kept} values, found {}",
                values.len()
            )));
        }
        let code_len = (kept * code_bits(m) as usize).div_ceil(8);
        let codes = &index[INDEX_HEADER_LEN..];
        if codes.len() != code_len {
            return Err(Error::Format(format!(
                "expected {code_len} code bytes, found {}",
                codes.len()
            )));
        }
        let c = NmCompressed {
            n,
            m,
            rows,
            cols,
            axis,
            values,
            codes: codes.to_vec(),
        };
        c.check_codes()?;
        Ok(c)
    }

    fn check_codes(&self) -> Result<()> {
        let keep = self.keep_per_window();
        let windows = self.values.len() / keep.max(1);
        for w in 0..windows {
            let mut prev: Option<usize> = None;
            for j in 0..keep {
                let code = self.code(w * keep + j);
                if code >= self.m || prev.is_some_and(|p| code <= p) {
                    return Err(Error::Format(format!(
                        "window {w}: position codes must be strictly increasing and < {}",
                        self.m
                    )));
                }
                prev = Some(code);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NmMeta {
    n: usize,
    m: usize,
    rows: usize,
    cols: usize,
    axis: GroupAxis,
    index_file: String,
}

/// Packs the kept entries of `w` under an N:M mask.
pub fn encode(w: &Tensor2D, mask: &SparsityMask) -> Result<NmCompressed> {
    let SparsityKind::NM { n, m } = mask.spec.kind else {
        return Err(Error::Constraint("encode needs an N:M mask".into()));
    };
    if m > MAX_M {
        return Err(Error::Constraint(format!(
            "compressed storage supports m <= {MAX_M}, got {m}"
        )));
    }
    if w.shape() != mask.shape() {
        return Err(Error::dim(format!(
            "weight is {:?}, mask is {:?}",
            w.shape(),
            mask.shape()
        )));
    }
    mask.validate()?;

    let (rows, cols) = w.shape();
    let axis = mask.spec.axis;
    let (groups, len) = match axis {
        GroupAxis::PerRow => (rows, cols),
        GroupAxis::PerColumn => (cols, rows),
    };
    let bits = code_bits(m) as usize;
    let kept_total = groups * len / m * (m - n);
    let mut values = Vec::with_capacity(kept_total);
    let mut codes = vec![0u8; (kept_total * bits).div_ceil(8)];
    let mut k = 0usize;
    for g in 0..groups {
        for pos in 0..len {
            let (r, c) = match axis {
                GroupAxis::PerRow => (g, pos),
                GroupAxis::PerColumn => (pos, g),
            };
            if mask.is_kept(r, c) {
                values.push(w.get(r, c));
                let bit = k * bits;
                let code = ((pos % m) as u16) << (bit % 8);
                codes[bit / 8] |= code as u8;
                if bit % 8 + bits > 8 {
                    codes[bit / 8 + 1] |= (code >> 8) as u8;
                }
                k += 1;
            }
        }
    }
    Ok(NmCompressed {
        n,
        m,
        rows,
        cols,
        axis,
        values,
        codes,
    })
}

/// `A · x` for the compressed matrix `A`, accumulating in `f64`.
pub fn spmv(c: &NmCompressed, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != c.cols {
        return Err(Error::dim(format!(
            "vector has {} entries, matrix has {} columns",
            x.len(),
            c.cols
        )));
    }
    let keep = c.keep_per_window();
    let per_group = c.group_len() / c.m * keep;
    match c.axis {
        GroupAxis::PerRow => Ok((0..c.rows)
            .into_par_iter()
            .map(|r| {
                let base = r * per_group;
                let mut acc = 0.0f64;
                for j in 0..per_group {
                    let k = base + j;
                    let col = (j / keep) * c.m + c.code(k);
                    acc += c.values[k] as f64 * x[col] as f64;
                }
                acc as f32
            })
            .collect()),
        GroupAxis::PerColumn => {
            let mut acc = vec![0.0f64; c.rows];
            for (col, &xv) in x.iter().enumerate() {
                let xv = xv as f64;
                let base = col * per_group;
                for j in 0..per_group {
                    let k = base + j;
                    let row = (j / keep) * c.m + c.code(k);
                    acc[row] += c.values[k] as f64 * xv;
                }
            }
            Ok(acc.into_iter().map(|v| v as f32).collect())
        }
    }
}

/// Dense `A · x` with the same `f64` accumulation as [`spmv`].
pub fn dense_matvec(a: &Tensor2D, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != a.cols() {
        return Err(Error::dim(format!(
            "vector has {} entries, matrix has {} columns",
            x.len(),
            a.cols()
        )));
    }
    Ok((0..a.rows())
        .into_par_iter()
        .map(|r| {
            a.row(r)
                .iter()
                .zip(x)
                .map(|(&w, &v)| w as f64 * v as f64)
                .sum::<f64>() as f32
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iters: usize,
    pub dense_ns: f64,
    pub sparse_ns: f64,
    pub speedup: f64,
    pub dense_bytes: usize,
    pub compressed_bytes: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    }
}

/// Median wall-clock time of one dense and one sparse matvec. Informational.
pub fn bench(c: &NmCompressed, dense: &Tensor2D, iters: usize) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::Config("bench needs at least one iteration".into()));
    }
    if dense.shape() != (c.rows, c.cols) {
        return Err(Error::dim("dense and compressed shapes differ"));
    }
    let x: Vec<f32> = (0..c.cols)
        .map(|i| ((i % 17) as f32 - 8.0) * 0.125)
        .collect();
    let time = |f: &dyn Fn() -> Vec<f32>| -> Vec<f64> {
        (0..iters)
            .map(|_| {
                let t = Instant::now();
                black_box(f());
                // Clamp to 1ns so a coarse clock cannot yield a zero median.
                (t.elapsed().as_nanos() as f64).max(1.0)
            })
            .collect()
    };
    let dense_ns = median(time(&|| dense_matvec(dense, black_box(&x)).unwrap()));
    let sparse_ns = median(time(&|| spmv(c, black_box(&x)).unwrap()));
    Ok(BenchReport {
        iters,
        dense_ns,
        sparse_ns,
        speedup: dense_ns / sparse_ns,
        dense_bytes: c.dense_bytes(),
        compressed_bytes: c.compressed_bytes(),
    })
}
