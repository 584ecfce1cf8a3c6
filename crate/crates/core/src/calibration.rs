//! Per-feature L2 activation norms accumulated over calibration tokens.

use std::borrow::Borrow;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glu::{self, MlpWeights};
use crate::tensor::Tensor2D;

/// Tokens per sequence used when chunking synthetic calibration data.
pub const DEFAULT_SEQ_LEN: usize = 2048;
/// Number of calibration sequences in the standard protocol.
pub const DEFAULT_NUM_SEQUENCES: usize = 128;

const COLUMN_CHUNK: usize = 32;

/// Running sum of squares per feature, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAccumulator {
    sumsq: Vec<f64>,
    token_count: u64,
}

impl NormAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            sumsq: vec![0.0; dim],
            token_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.sumsq.len()
    }

    pub fn token_count(&self) -> u64 {
        self.token_count
    }

    pub fn sumsq(&self) -> &[f64] {
        &self.sumsq
    }

    /// Adds `Σ_t batch[t, j]²` to every feature `j`.
    ///
    /// Each feature is summed in row order, so the result does not depend
    /// on how columns are split across threads.
    pub fn accumulate(&mut self, batch: &Tensor2D) -> Result<()> {
        if batch.cols() != self.dim() {
            return Err(Error::dim(format!(
                "calibration batch has {} features, accumulator expects {}",
                batch.cols(),
                self.dim()
            )));
        }
        let cols = batch.cols();
        self.sumsq
            .par_chunks_mut(COLUMN_CHUNK)
            .enumerate()
            .for_each(|(chunk, acc)| {
                let start = chunk * COLUMN_CHUNK;
                for r in 0..batch.rows() {
                    let row = &batch.data()[r * cols + start..r * cols + start + acc.len()];
                    for (a, &v) in acc.iter_mut().zip(row) {
                        let v = v as f64;
                        *a += v * v;
                    }
                }
            });
        self.token_count += batch.rows() as u64;
        Ok(())
    }

    /// Combines two partial accumulators.
    pub fn merge(&mut self, other: &NormAccumulator) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::dim(format!(
                "cannot merge accumulators of dim {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        for (a, b) in self.sumsq.iter_mut().zip(&other.sumsq) {
            *a += b;
        }
        self.token_count += other.token_count;
        Ok(())
    }

    pub fn finalize(&self) -> Vec<f32> {
        self.sumsq.iter().map(|s| s.sqrt() as f32).collect()
    }
}

/// Activation norms of one MLP block over the calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibStats {
    /// `‖X_j‖₂` per hidden input feature.
    pub input_norms: Vec<f32>,
    /// `‖y_i‖₂` per intermediate neuron.
    pub intermediate_norms: Vec<f32>,
    pub token_count: u64,
}

impl CalibStats {
    /// Multiplies every intermediate norm by `factor`.
    pub fn with_scaled_intermediate(&self, factor: f32) -> CalibStats {
        CalibStats {
            intermediate_norms: self.intermediate_norms.iter().map(|n| n * factor).collect(),
            ..self.clone()
        }
    }
}

/// Streams calibration batches through the dense block and collects both
/// input and intermediate norms in a single pass.
pub fn calibrate_mlp<I, B>(w: &MlpWeights, batches: I) -> Result<CalibStats>
where
    I: IntoIterator<Item = B>,
    B: Borrow<Tensor2D>,
{
    let mut input = NormAccumulator::new(w.d_hidden());
    let mut inter = NormAccumulator::new(w.d_int());
    for batch in batches {
        let batch = batch.borrow();
        input.accumulate(batch)?;
        if batch.rows() > 0 {
            inter.accumulate(&glu::intermediate(w, batch)?)?;
        }
    }
    if input.token_count() == 0 {
        return Err(Error::EmptyCalibration);
    }
    Ok(CalibStats {
        input_norms: input.finalize(),
        intermediate_norms: inter.finalize(),
        token_count: input.token_count(),
    })
}

/// Seeded Gaussian activations with optional heavy outlier columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub tokens: usize,
    pub dim: usize,
    /// Number of feature columns scaled by `scale`.
    pub outliers: usize,
    pub scale: f32,
}

impl SyntheticSpec {
    /// Columns receiving the outlier scale, chosen deterministically from `seed`.
    pub fn outlier_columns(&self, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f75_746c_6965_7273);
        let k = self.outliers.min(self.dim);
        let mut cols = rand::seq::index::sample(&mut rng, self.dim, k).into_vec();
        cols.sort_unstable();
        cols
    }

    /// Generates the token stream as batches of at most `DEFAULT_SEQ_LEN` rows.
    /// The same seed always yields bit-identical batches.
    pub fn generate(&self, seed: u64) -> Vec<Tensor2D> {
        let mut col_scale = vec![1.0f32; self.dim];
        for c in self.outlier_columns(seed) {
            col_scale[c] = self.scale;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut remaining = self.tokens;
        while remaining > 0 {
            let rows = remaining.min(DEFAULT_SEQ_LEN);
            let t = Tensor2D::from_fn(rows, self.dim, |_, c| {
                let v: f32 = StandardNormal.sample(&mut rng);
                v * col_scale[c]
            });
            out.push(t);
            remaining -= rows;
        }
        out
    }
}

impl FromStr for SyntheticSpec {
    type Err = Error;

    /// Parses `tokens=N,dim=D[,outliers=K][,scale=S]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SyntheticSpec {
            tokens: DEFAULT_NUM_SEQUENCES * DEFAULT_SEQ_LEN,
            dim: 0,
            outliers: 0,
            scale: 1.0,
        };
        let bad = |m: String| Error::Config(format!("--synthetic: {m}"));
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got '{part}'")))?;
            let int = || {
                val.parse::<usize>()
                    .map_err(|_| bad(format!("{key} must be a non-negative integer")))
            };
            match key {
                "tokens" => spec.tokens = int()?,
                "dim" => spec.dim = int()?,
                "outliers" => spec.outliers = int()?,
                "scale" => {
                    spec.scale = val
                        .parse::<f32>()
                        .ok()
                        .filter(|v| v.is_finite() && *v > 0.0)
                        .ok_or_else(|| bad("scale must be a positive number".into()))?
                }
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        if spec.dim == 0 {
            return Err(bad("dim must be given and positive".into()));
        }
        if spec.outliers > spec.dim {
            return Err(bad("outliers cannot exceed dim".into()));
        }
        Ok(spec)
    }
}
