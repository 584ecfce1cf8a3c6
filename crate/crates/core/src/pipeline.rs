//! End-to-end pruning of MLP triplets and generic linear layers, plus the
//! structural-alignment and reconstruction diagnostics.
//!
//! Scores are computed on transposed weights in `(d_out, d_in)` layout and
//! the resulting masks are transposed back, so callers always see masks in
//! the same orientation as [`MlpWeights`].

use std::borrow::Borrow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibStats;
use crate::error::{Error, Result};
use crate::glu::{self, GluVariant, MlpWeights};
use crate::importance::{self, ImportanceMatrix, DEFAULT_ALPHA};
use crate::masking::{self, GroupAxis, SparsityKind, SparsityMask};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Magnitude,
    Wanda,
    Dass,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Magnitude, Metric::Wanda, Metric::Dass];
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Magnitude => "magnitude",
            Metric::Wanda => "wanda",
            Metric::Dass => "dass",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "magnitude" => Ok(Metric::Magnitude),
            "wanda" => Ok(Metric::Wanda),
            "dass" => Ok(Metric::Dass),
            other => Err(Error::Config(format!(
                "unknown metric '{other}' (expected magnitude, wanda or dass)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub variant: GluVariant,
    pub alpha: f32,
    pub sparsity: SparsityKind,
    pub metric: Metric,
    pub seed: u64,
}

impl PruneConfig {
    pub fn new(metric: Metric, sparsity: SparsityKind) -> Self {
        Self {
            variant: GluVariant::SwiGLU,
            alpha: DEFAULT_ALPHA,
            sparsity,
            metric,
            seed: 0,
        }
    }

    pub fn with_alpha(mut self, alpha: f32) -> Self {
        self.alpha = alpha;
        self
    }
}

/// Importance scores of one block, each in `(d_out, d_in)` orientation,
/// paired with the comparison-group axis used for that projection.
#[derive(Debug, Clone)]
pub struct MlpScores {
    pub gate: ImportanceMatrix,
    pub up: ImportanceMatrix,
    pub down: ImportanceMatrix,
    pub gate_up_axis: GroupAxis,
}

/// Masks in storage orientation: `gate`/`up` are `(d_hidden, d_int)`,
/// `down` is `(d_int, d_hidden)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpMasks {
    pub gate: SparsityMask,
    pub up: SparsityMask,
    pub down: SparsityMask,
}

#[derive(Debug, Clone)]
pub struct PrunedMlp {
    pub masks: MlpMasks,
    pub weights: MlpWeights,
}

fn check_stats(w: &MlpWeights, stats: &CalibStats) -> Result<()> {
    if stats.input_norms.len() != w.d_hidden() {
        return Err(Error::dim(format!(
            "calibration has {} input norms, weights have d_hidden = {}",
            stats.input_norms.len(),
            w.d_hidden()
        )));
    }
    if stats.intermediate_norms.len() != w.d_int() {
        return Err(Error::dim(format!(
            "calibration has {} intermediate norms, weights have d_int = {}",
            stats.intermediate_norms.len(),
            w.d_int()
        )));
    }
    Ok(())
}

/// Scores all three projections for the configured metric.
///
/// Magnitude and Wanda compare weights per output neuron everywhere.
/// DaSS compares gate/up weights per input feature (columns of `W⊤`) so
/// that intermediate norms can differentiate them, and down weights per
/// output feature.
pub fn score_mlp(w: &MlpWeights, stats: &CalibStats, cfg: &PruneConfig) -> Result<MlpScores> {
    check_stats(w, stats)?;
    let gate_t = w.gate.transpose();
    let up_t = w.up.transpose();
    let down_t = w.down.transpose();
    let inter = &stats.intermediate_norms;
    Ok(match cfg.metric {
        Metric::Magnitude => MlpScores {
            gate: importance::magnitude_scores(&gate_t),
            up: importance::magnitude_scores(&up_t),
            down: importance::magnitude_scores(&down_t),
            gate_up_axis: GroupAxis::PerRow,
        },
        Metric::Wanda => MlpScores {
            gate: importance::wanda_scores(&gate_t, &stats.input_norms)?,
            up: importance::wanda_scores(&up_t, &stats.input_norms)?,
            down: importance::wanda_scores(&down_t, inter)?,
            gate_up_axis: GroupAxis::PerRow,
        },
        Metric::Dass => MlpScores {
            gate: importance::dass_gate_up_scores(&gate_t, inter, cfg.alpha)?,
            up: importance::dass_gate_up_scores(&up_t, inter, cfg.alpha)?,
            down: importance::dass_down_scores(&down_t, inter)?,
            gate_up_axis: GroupAxis::PerColumn,
        },
    })
}

/// Masks and prunes a block with any metric. Kept weights are untouched.
pub fn prune_mlp(w: &MlpWeights, stats: &CalibStats, cfg: &PruneConfig) -> Result<PrunedMlp> {
    cfg.sparsity.validate()?;
    let scores = score_mlp(w, stats, cfg)?;
    let mask = |s: &ImportanceMatrix, axis: GroupAxis| -> Result<SparsityMask> {
        Ok(masking::build_mask(s, cfg.sparsity.with_axis(axis))?.transpose())
    };
    let masks = MlpMasks {
        gate: mask(&scores.gate, scores.gate_up_axis)?,
        up: mask(&scores.up, scores.gate_up_axis)?,
        down: mask(&scores.down, GroupAxis::PerRow)?,
    };
    let weights = MlpWeights::new(
        masking::apply_mask(&w.gate, &masks.gate)?,
        masking::apply_mask(&w.up, &masks.up)?,
        masking::apply_mask(&w.down, &masks.down)?,
        w.variant,
    )?;
    Ok(PrunedMlp { masks, weights })
}

/// DaSS pruning: input-balanced gate/up, output-balanced down.
pub fn prune_mlp_dass(w: &MlpWeights, stats: &CalibStats, cfg: &PruneConfig) -> Result<PrunedMlp> {
    if cfg.metric != Metric::Dass {
        return Err(Error::Config(format!(
            "prune_mlp_dass called with metric {}",
            cfg.metric
        )));
    }
    prune_mlp(w, stats, cfg)
}

/// Wanda pruning of a `(d_out, d_in)` linear layer, output-balanced.
pub fn prune_linear_wanda(
    w: &Tensor2D,
    input_norms: &[f32],
    sparsity: SparsityKind,
) -> Result<(SparsityMask, Tensor2D)> {
    let scores = importance::wanda_scores(w, input_norms)?;
    let mask = masking::build_mask(&scores, sparsity.with_axis(GroupAxis::PerRow))?;
    let pruned = masking::apply_mask(w, &mask)?;
    Ok((mask, pruned))
}

/// Magnitude pruning of a `(d_out, d_in)` linear layer, output-balanced.
pub fn prune_linear_magnitude(
    w: &Tensor2D,
    sparsity: SparsityKind,
) -> Result<(SparsityMask, Tensor2D)> {
    let scores = importance::magnitude_scores(w);
    let mask = masking::build_mask(&scores, sparsity.with_axis(GroupAxis::PerRow))?;
    let pruned = masking::apply_mask(w, &mask)?;
    Ok((mask, pruned))
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// How consistently the three projections keep the weights of each
/// intermediate neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyGroupReport {
    /// `[gate, up, down]` kept fraction per intermediate neuron.
    pub per_neuron_kept_fraction: Vec<[f64; 3]>,
    /// Pearson correlation of gate and down kept fractions; `None` when
    /// either vector has zero variance.
    pub gate_down_correlation: Option<f64>,
    pub up_down_correlation: Option<f64>,
}

impl DependencyGroupReport {
    /// Gate/down correlation, with an undefined correlation counted as 0.
    pub fn alignment(&self) -> f64 {
        self.gate_down_correlation.unwrap_or(0.0)
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.is_empty() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

pub fn dependency_report(masks: &MlpMasks) -> Result<DependencyGroupReport> {
    let (h, i) = masks.gate.shape();
    if masks.up.shape() != (h, i) || masks.down.shape() != (i, h) {
        return Err(Error::dim(format!(
            "mask shapes gate {:?}, up {:?}, down {:?} do not form one MLP block",
            masks.gate.shape(),
            masks.up.shape(),
            masks.down.shape()
        )));
    }
    let frac = |count: usize| if h == 0 { 0.0 } else { count as f64 / h as f64 };
    let per_neuron: Vec<[f64; 3]> = (0..i)
        .map(|n| {
            let g = (0..h).filter(|&r| masks.gate.is_kept(r, n)).count();
            let u = (0..h).filter(|&r| masks.up.is_kept(r, n)).count();
            let d = (0..h).filter(|&c| masks.down.is_kept(n, c)).count();
            [frac(g), frac(u), frac(d)]
        })
        .collect();
    let col = |k: usize| per_neuron.iter().map(|f| f[k]).collect::<Vec<f64>>();
    let (g, u, d) = (col(0), col(1), col(2));
    Ok(DependencyGroupReport {
        gate_down_correlation: pearson(&g, &d),
        up_down_correlation: pearson(&u, &d),
        per_neuron_kept_fraction: per_neuron,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSparsity {
    pub gate: f64,
    pub up: f64,
    pub down: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frobenius_error: f64,
    pub relative_error: f64,
    pub sparsity: ProjectionSparsity,
    pub token_count: u64,
}

fn zero_fraction(t: &Tensor2D) -> f64 {
    if t.data().is_empty() {
        return 0.0;
    }
    t.data().iter().filter(|&&v| v == 0.0).count() as f64 / t.data().len() as f64
}

/// Output reconstruction error of `pruned` against `dense` on the given
/// batches.
pub fn eval_reconstruction<I, B>(
    dense: &MlpWeights,
    pruned: &MlpWeights,
    batches: I,
) -> Result<EvalReport>
where
    I: IntoIterator<Item = B>,
    B: Borrow<Tensor2D>,
{
    if dense.gate.shape() != pruned.gate.shape() || dense.down.shape() != pruned.down.shape() {
        return Err(Error::dim("dense and pruned blocks have different shapes"));
    }
    let (mut err_sq, mut ref_sq) = (0.0f64, 0.0f64);
    let mut tokens = 0u64;
    for batch in batches {
        let batch = batch.borrow();
        let (_, z_dense) = glu::mlp_forward(dense, batch)?;
        let (_, z_pruned) = glu::mlp_forward(pruned, batch)?;
        for (a, b) in z_dense.data().iter().zip(z_pruned.data()) {
            let (a, b) = (*a as f64, *b as f64);
            err_sq += (a - b) * (a - b);
            ref_sq += a * a;
        }
        tokens += batch.rows() as u64;
    }
    if tokens == 0 {
        return Err(Error::EmptyCalibration);
    }
    let frobenius_error = err_sq.sqrt();
    let relative_error = if frobenius_error == 0.0 {
        0.0
    } else if ref_sq == 0.0 {
        return Err(Error::Data {
            tensor: "z".into(),
            reason: "dense output is identically zero; relative error undefined".into(),
        });
    } else {
        frobenius_error / ref_sq.sqrt()
    };
    Ok(EvalReport {
        frobenius_error,
        relative_error,
        sparsity: ProjectionSparsity {
            gate: zero_fraction(&pruned.gate),
            up: zero_fraction(&pruned.up),
            down: zero_fraction(&pruned.down),
        },
        token_count: tokens,
    })
}
