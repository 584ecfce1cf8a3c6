//! Dependency-aware semi-structured pruning for gated (GLU) MLP blocks.
//!
//! The crate scores every weight of a gate/up/down triplet, turns scores
//! into unstructured or N:M masks with per-group balancing, and applies
//! them without updating the surviving weights. Magnitude and Wanda
//! baselines share the same machinery. Supporting pieces: a safetensors
//! reader/writer, a streaming activation-norm calibrator, alignment and
//! reconstruction diagnostics, and a compressed N:M matvec kernel.

pub mod calibration;
pub mod cli;
pub mod error;
pub mod glu;
pub mod importance;
pub mod masking;
pub mod pipeline;
pub mod sparse;
pub mod tensor;

pub use calibration::{calibrate_mlp, CalibStats, NormAccumulator, SyntheticSpec};
pub use error::{Error, Result};
pub use glu::{activation, mlp_forward, GluVariant, MlpWeights};
pub use importance::{
    dass_down_scores, dass_gate_up_scores, magnitude_scores, wanda_scores, ImportanceMatrix,
    ScoreKind,
};
pub use masking::{
    apply_mask, mask_sparsity, nm_mask, topk_mask, GroupAxis, SparsityKind, SparsityMask,
    SparsitySpec,
};
pub use pipeline::{
    dependency_report, eval_reconstruction, prune_linear_wanda, prune_mlp, prune_mlp_dass,
    DependencyGroupReport, EvalReport, Metric, MlpMasks, PruneConfig, PrunedMlp,
};
pub use sparse::{bench, encode, spmv, BenchReport, NmCompressed};
pub use tensor::{Tensor2D, TensorFile};
