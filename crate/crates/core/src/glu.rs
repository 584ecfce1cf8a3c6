//! Reference forward pass of gated MLP blocks.
//!
//! With `x` of shape `(L, d_hidden)`:
//!
//! ```text
//! y = act(x · gate) * (x · up)      (L, d_int)
//! z = y · down                      (L, d_hidden)
//! ```
//!
//! `gate` and `up` are stored `(d_hidden, d_int)` and `down` is stored
//! `(d_int, d_hidden)`, so intermediate neuron `i` owns column `i` of
//! `gate` and `up` and row `i` of `down`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Gating activation of a GLU block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GluVariant {
    /// SiLU gate, `t * sigmoid(t)`.
    #[default]
    SwiGLU,
    /// Exact (erf-based) GeLU gate, `t * Phi(t)`.
    GeGLU,
    /// ReLU gate.
    ReGLU,
}

impl GluVariant {
    pub const ALL: [GluVariant; 3] = [GluVariant::SwiGLU, GluVariant::GeGLU, GluVariant::ReGLU];

    pub fn name(self) -> &'static str {
        match self {
            GluVariant::SwiGLU => "swiglu",
            GluVariant::GeGLU => "geglu",
            GluVariant::ReGLU => "reglu",
        }
    }
}

impl fmt::Display for GluVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GluVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "swiglu" => Ok(GluVariant::SwiGLU),
            "geglu" => Ok(GluVariant::GeGLU),
            "reglu" => Ok(GluVariant::ReGLU),
            other => Err(Error::Config(format!(
                "unknown GLU variant '{other}' (expected swiglu, geglu or reglu)"
            ))),
        }
    }
}

/// Applies the variant's gating activation. Evaluated in `f64`.
pub fn activation(variant: GluVariant, t: f32) -> f32 {
    let t = t as f64;
    let v = match variant {
        GluVariant::SwiGLU => t / (1.0 + (-t).exp()),
        GluVariant::GeGLU => 0.5 * t * (1.0 + libm::erf(t / std::f64::consts::SQRT_2)),
        GluVariant::ReGLU => t.max(0.0),
    };
    v as f32
}

/// The (gate, up, down) projection triplet of one MLP block.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub gate: Tensor2D,
    pub up: Tensor2D,
    pub down: Tensor2D,
    pub variant: GluVariant,
}

impl MlpWeights {
    pub fn new(gate: Tensor2D, up: Tensor2D, down: Tensor2D, variant: GluVariant) -> Result<Self> {
        let w = Self {
            gate,
            up,
            down,
            variant,
        };
        w.check()?;
        Ok(w)
    }

    fn check(&self) -> Result<()> {
        let (h, i) = self.gate.shape();
        if self.up.shape() != (h, i) {
            return Err(Error::dim(format!(
                "up is {:?}, expected {:?} to match gate",
                self.up.shape(),
                (h, i)
            )));
        }
        if self.down.shape() != (i, h) {
            return Err(Error::dim(format!(
                "down is {:?}, expected {:?} (d_int, d_hidden)",
                self.down.shape(),
                (i, h)
            )));
        }
        Ok(())
    }

    pub fn d_hidden(&self) -> usize {
        self.gate.rows()
    }

    pub fn d_int(&self) -> usize {
        self.gate.cols()
    }
}

/// Intermediate activation `y` only. Used by calibration, which does not
/// need the down projection.
pub fn intermediate(w: &MlpWeights, x: &Tensor2D) -> Result<Tensor2D> {
    if x.cols() != w.d_hidden() {
        return Err(Error::dim(format!(
            "input x has {} features, weights expect d_hidden = {}",
            x.cols(),
            w.d_hidden()
        )));
    }
    let mut g = x.matmul(&w.gate)?;
    let u = x.matmul(&w.up)?;
    let variant = w.variant;
    g.data_mut()
        .par_iter_mut()
        .zip(u.data().par_iter())
        .for_each(|(g, &u)| *g = activation(variant, *g) * u);
    Ok(g)
}

/// Full forward pass, returning both the intermediate `y` and output `z`.
pub fn mlp_forward(w: &MlpWeights, x: &Tensor2D) -> Result<(Tensor2D, Tensor2D)> {
    w.check()?;
    let y = intermediate(w, x)?;
    let z = y.matmul(&w.down)?;
    Ok((y, z))
}
