//! Per-weight importance scores.
//!
//! All scoring functions take the weight in `(d_out, d_in)` orientation,
//! i.e. the transpose of the `x · W` storage used by [`crate::glu`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Default group-importance strength for gate/up scores.
pub const DEFAULT_ALPHA: f32 = 0.5;

/// Alpha values swept by the `report` command.
pub const ALPHA_SWEEP: [f32; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Magnitude,
    Wanda,
    DassGateUp,
    DassDown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMatrix {
    pub scores: Tensor2D,
    pub kind: ScoreKind,
    /// Only meaningful for [`ScoreKind::DassGateUp`].
    pub alpha: f32,
}

impl ImportanceMatrix {
    pub fn shape(&self) -> (usize, usize) {
        self.scores.shape()
    }
}

/// `|w[i,j]| * col_factor[j]`, product rounded once to `f32`.
fn scale_columns(w: &Tensor2D, col_factor: &[f64]) -> Tensor2D {
    let cols = w.cols();
    let mut out = w.clone();
    if cols == 0 {
        return out;
    }
    out.data_mut().par_chunks_mut(cols).for_each(|row| {
        for (v, f) in row.iter_mut().zip(col_factor) {
            *v = (v.abs() as f64 * f) as f32;
        }
    });
    out
}

fn scale_rows(w: &Tensor2D, row_factor: &[f64]) -> Tensor2D {
    let cols = w.cols();
    let mut out = w.clone();
    if cols == 0 {
        return out;
    }
    out.data_mut()
        .par_chunks_mut(cols)
        .zip(row_factor.par_iter())
        .for_each(|(row, &f)| {
            for v in row.iter_mut() {
                *v = (v.abs() as f64 * f) as f32;
            }
        });
    out
}

fn check_norms(norms: &[f32], expected: usize, what: &str) -> Result<()> {
    if norms.len() != expected {
        return Err(Error::dim(format!(
            "{what}: {} norms for {expected} features",
            norms.len()
        )));
    }
    if let Some(bad) = norms.iter().find(|n| !(n.is_finite() && **n >= 0.0)) {
        return Err(Error::Config(format!(
            "{what}: norms must be finite and non-negative, got {bad}"
        )));
    }
    Ok(())
}

pub fn magnitude_scores(w: &Tensor2D) -> ImportanceMatrix {
    let mut scores = w.clone();
    scores.data_mut().iter_mut().for_each(|v| *v = v.abs());
    ImportanceMatrix {
        scores,
        kind: ScoreKind::Magnitude,
        alpha: 0.0,
    }
}

/// `|W[i,j]| * ‖X_j‖₂` for a `(d_out, d_in)` weight.
pub fn wanda_scores(w: &Tensor2D, input_norms: &[f32]) -> Result<ImportanceMatrix> {
    check_norms(input_norms, w.cols(), "wanda")?;
    let f: Vec<f64> = input_norms.iter().map(|&n| n as f64).collect();
    Ok(ImportanceMatrix {
        scores: scale_columns(w, &f),
        kind: ScoreKind::Wanda,
        alpha: 0.0,
    })
}

/// Gate/up score `|W⊤[i,j]| * ‖y_i‖₂^alpha` on a `(d_int, d_hidden)` weight.
///
/// `0^0` is taken as 1, so `alpha = 0` reproduces magnitude scores exactly.
pub fn dass_gate_up_scores(
    w_t: &Tensor2D,
    intermediate_norms: &[f32],
    alpha: f32,
) -> Result<ImportanceMatrix> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Config(format!(
            "alpha must be finite and non-negative, got {alpha}"
        )));
    }
    check_norms(intermediate_norms, w_t.rows(), "dass gate/up")?;
    let f: Vec<f64> = intermediate_norms
        .iter()
        .map(|&n| (n as f64).powf(alpha as f64))
        .collect();
    Ok(ImportanceMatrix {
        scores: scale_rows(w_t, &f),
        kind: ScoreKind::DassGateUp,
        alpha,
    })
}

/// Down score `|W⊤[i,j]| * ‖y_j‖₂` on a `(d_hidden, d_int)` weight.
/// Identical to [`wanda_scores`] fed intermediate norms.
pub fn dass_down_scores(w_t: &Tensor2D, intermediate_norms: &[f32]) -> Result<ImportanceMatrix> {
    check_norms(intermediate_norms, w_t.cols(), "dass down")?;
    let mut m = wanda_scores(w_t, intermediate_norms)?;
    m.kind = ScoreKind::DassDown;
    Ok(m)
}
