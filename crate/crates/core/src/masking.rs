//! Keep/prune masks under comparison-group semantics.
//!
//! A comparison group is one row ([`GroupAxis::PerRow`]) or one column
//! ([`GroupAxis::PerColumn`]) of the score matrix. Unstructured sparsity
//! prunes `floor(s * len)` entries per group; N:M sparsity prunes exactly
//! `n` entries in every aligned window of `m` consecutive entries of a group.
//!
//! Ordering inside a group is by score ascending, then by index ascending,
//! so among equal scores the lowest index is pruned first.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceMatrix;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAxis {
    /// Each row is a group; N:M windows run along the row.
    PerRow,
    /// Each column is a group; N:M windows run down the column.
    PerColumn,
}

impl GroupAxis {
    pub fn flipped(self) -> GroupAxis {
        match self {
            GroupAxis::PerRow => GroupAxis::PerColumn,
            GroupAxis::PerColumn => GroupAxis::PerRow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SparsityKind {
    /// Fraction `s` in `[0, 1)` of each group pruned.
    Unstructured { s: f64 },
    /// `n` zeros in every aligned window of `m`.
    #[serde(rename = "nm")]
    NM { n: usize, m: usize },
}

impl SparsityKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsityKind::Unstructured { s } => {
                if !(0.0..1.0).contains(&s) {
                    return Err(Error::Config(format!(
                        "sparsity must lie in [0, 1), got {s}"
                    )));
                }
            }
            SparsityKind::NM { n, m } => {
                if n == 0 || n >= m {
                    return Err(Error::Config(format!(
                        "N:M requires 0 < N < M, got {n}:{m}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn with_axis(self, axis: GroupAxis) -> SparsitySpec {
        SparsitySpec { kind: self, axis }
    }
}

impl fmt::Display for SparsityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsityKind::Unstructured { s } => write!(f, "unstructured({s})"),
            SparsityKind::NM { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

impl FromStr for SparsityKind {
    type Err = Error;

    /// Parses `"N:M"`.
    fn from_str(s: &str) -> Result<Self> {
        let (n, m) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected N:M, got '{s}'")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("expected N:M, got '{s}'")))
        };
        let kind = SparsityKind::NM {
            n: parse(n)?,
            m: parse(m)?,
        };
        kind.validate()?;
        Ok(kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsitySpec {
    pub kind: SparsityKind,
    pub axis: GroupAxis,
}

impl SparsitySpec {
    pub fn unstructured(s: f64, axis: GroupAxis) -> Self {
        SparsityKind::Unstructured { s }.with_axis(axis)
    }

    pub fn nm(n: usize, m: usize, axis: GroupAxis) -> Self {
        SparsityKind::NM { n, m }.with_axis(axis)
    }
}

/// Number of entries pruned from a group of `len` at sparsity `s`.
pub fn prune_count(s: f64, len: usize) -> usize {
    (s * len as f64).floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
    pub spec: SparsitySpec,
}

impl SparsityMask {
    pub fn all_keep(rows: usize, cols: usize, spec: SparsitySpec) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
            spec,
        }
    }

    pub fn from_keep(
        rows: usize,
        cols: usize,
        keep: Vec<bool>,
        spec: SparsitySpec,
    ) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} mask needs {} flags, got {}",
                rows * cols,
                keep.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            keep,
            spec,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    #[inline]
    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Transposed mask; the group axis flips with it.
    pub fn transpose(&self) -> SparsityMask {
        let mut keep = vec![false; self.keep.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                keep[c * self.rows + r] = self.keep[r * self.cols + c];
            }
        }
        SparsityMask {
            rows: self.cols,
            cols: self.rows,
            keep,
            spec: SparsitySpec {
                kind: self.spec.kind,
                axis: self.spec.axis.flipped(),
            },
        }
    }

    /// 0/1-valued matrix for export.
    pub fn to_tensor(&self) -> Tensor2D {
        let data = self
            .keep
            .iter()
            .map(|&k| if k { 1.0 } else { 0.0 })
            .collect();
        Tensor2D::new(self.rows, self.cols, data).expect("mask shape")
    }

    fn group_len(&self) -> usize {
        match self.spec.axis {
            GroupAxis::PerRow => self.cols,
            GroupAxis::PerColumn => self.rows,
        }
    }

    fn group_count(&self) -> usize {
        match self.spec.axis {
            GroupAxis::PerRow => self.rows,
            GroupAxis::PerColumn => self.cols,
        }
    }

    fn flat_index(&self, group: usize, pos: usize) -> usize {
        match self.spec.axis {
            GroupAxis::PerRow => group * self.cols + pos,
            GroupAxis::PerColumn => pos * self.cols + group,
        }
    }

    /// Checks the mask against its own spec, walking every group and window.
    pub fn validate(&self) -> Result<()> {
        let len = self.group_len();
        match self.spec.kind {
            SparsityKind::Unstructured { s } => {
                let want = len - prune_count(s, len);
                for g in 0..self.group_count() {
                    let kept = (0..len)
                        .filter(|&p| self.keep[self.flat_index(g, p)])
                        .count();
                    if kept != want {
                        return Err(Error::Constraint(format!(
                            "group {g} keeps {kept} of {len}, expected {want}"
                        )));
                    }
                }
            }
            SparsityKind::NM { n, m } => {
                if m == 0 || !len.is_multiple_of(m) {
                    return Err(Error::Constraint(format!(
                        "group length {len} is not a multiple of {m}"
                    )));
                }
                for g in 0..self.group_count() {
                    for w in 0..len / m {
                        let kept = (w * m..(w + 1) * m)
                            .filter(|&p| self.keep[self.flat_index(g, p)])
                            .count();
                        if kept != m - n {
                            return Err(Error::Constraint(format!(
                                "group {g} window {w} keeps {kept}, expected {}",
                                m - n
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn score_order(scores: &[f32], a: usize, b: usize) -> Ordering {
    scores[a].total_cmp(&scores[b]).then(a.cmp(&b))
}

/// Marks the `prune` lowest-ranked entries of `scores` as pruned.
fn select_keep(scores: &[f32], prune: usize, keep: &mut [bool]) {
    keep.iter_mut().for_each(|k| *k = true);
    if prune == 0 {
        return;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if prune < idx.len() {
        idx.select_nth_unstable_by(prune - 1, |&a, &b| score_order(scores, a, b));
    }
    for &i in &idx[..prune] {
        keep[i] = false;
    }
}

fn group_scores(scores: &Tensor2D, axis: GroupAxis, g: usize) -> Vec<f32> {
    match axis {
        GroupAxis::PerRow => scores.row(g).to_vec(),
        GroupAxis::PerColumn => (0..scores.rows()).map(|r| scores.get(r, g)).collect(),
    }
}

/// Runs `line_keep` on every group in parallel and scatters the results.
fn build<F>(scores: &Tensor2D, spec: SparsitySpec, line_keep: F) -> SparsityMask
where
    F: Fn(&[f32], &mut [bool]) + Sync,
{
    let (rows, cols) = scores.shape();
    let groups = match spec.axis {
        GroupAxis::PerRow => rows,
        GroupAxis::PerColumn => cols,
    };
    let lines: Vec<Vec<bool>> = (0..groups)
        .into_par_iter()
        .map(|g| {
            let s = group_scores(scores, spec.axis, g);
            let mut keep = vec![true; s.len()];
            line_keep(&s, &mut keep);
            keep
        })
        .collect();
    let mut mask = SparsityMask::all_keep(rows, cols, spec);
    for (g, line) in lines.iter().enumerate() {
        for (p, &k) in line.iter().enumerate() {
            let i = mask.flat_index(g, p);
            mask.keep[i] = k;
        }
    }
    mask
}

/// Unstructured top-k masking within each comparison group.
pub fn topk_mask(scores: &ImportanceMatrix, spec: SparsitySpec) -> Result<SparsityMask> {
    let SparsityKind::Unstructured { s } = spec.kind else {
        return Err(Error::Config("topk_mask needs an unstructured spec".into()));
    };
    spec.kind.validate()?;
    Ok(build(&scores.scores, spec, |line, keep| {
        select_keep(line, prune_count(s, line.len()), keep)
    }))
}

/// N:M masking over aligned windows of each comparison group.
pub fn nm_mask(scores: &ImportanceMatrix, spec: SparsitySpec) -> Result<SparsityMask> {
    let SparsityKind::NM { n, m } = spec.kind else {
        return Err(Error::Config("nm_mask needs an N:M spec".into()));
    };
    spec.kind.validate()?;
    let (rows, cols) = scores.shape();
    let (len, along) = match spec.axis {
        GroupAxis::PerRow => (cols, "row"),
        GroupAxis::PerColumn => (rows, "column"),
    };
    if len % m != 0 {
        return Err(Error::Shape(format!(
            "{n}:{m} sparsity needs {along} length divisible by {m}, got {len}; \
             pad the matrix to a multiple of {m} or use unstructured sparsity"
        )));
    }
    Ok(build(&scores.scores, spec, |line, keep| {
        for (sw, kw) in line.chunks_exact(m).zip(keep.chunks_exact_mut(m)) {
            select_keep(sw, n, kw);
        }
    }))
}

/// Dispatches on the spec kind.
pub fn build_mask(scores: &ImportanceMatrix, spec: SparsitySpec) -> Result<SparsityMask> {
    match spec.kind {
        SparsityKind::Unstructured { .. } => topk_mask(scores, spec),
        SparsityKind::NM { .. } => nm_mask(scores, spec),
    }
}

/// Zeroes pruned entries; kept entries are copied bit-for-bit.
pub fn apply_mask(w: &Tensor2D, mask: &SparsityMask) -> Result<Tensor2D> {
    if w.shape() != mask.shape() {
        return Err(Error::dim(format!(
            "weight is {:?}, mask is {:?}",
            w.shape(),
            mask.shape()
        )));
    }
    let mut out = w.clone();
    for (v, &k) in out.data_mut().iter_mut().zip(mask.keep()) {
        if !k {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Fraction of pruned entries.
pub fn mask_sparsity(mask: &SparsityMask) -> f64 {
    if mask.keep.is_empty() {
        return 0.0;
    }
    1.0 - mask.kept_count() as f64 / mask.keep.len() as f64
}
