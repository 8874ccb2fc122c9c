//! Hyperglycemia detection from single-lead ECG.
//!
//! The pipeline mirrors a wearable deployment: raw ECG recordings are
//! trimmed, bandpass filtered, segmented into fixed-width heartbeat windows
//! around detected R-peaks, standardized with training-set statistics, and
//! classified by a small 1-D CNN whose blocks carry channel and spatial
//! attention. Evaluation is subject-disjoint by default; a leaky per-subject
//! mixed split is available for generalization-gap experiments.
//!
//! Module map:
//! - [`signal`] — deterministic preprocessing (trim, filter, R-peaks, segmentation, scaling)
//! - [`tensor`] — dense f64 tensors with a reverse-mode autodiff tape
//! - [`model`] — the attention-CNN classifier and its checkpoint format
//! - [`cohort`] — manifests, labeling, splits, and the synthetic ECG cohort generator
//! - [`train`] — mini-batch BCE training with Adam/SGD and early stopping
//! - [`eval`] — ROC/AUC, sensitivity/specificity, subject aggregation, split-protocol comparison
//! - [`cli`] — the command surface used by the `ecgcbam` binary

pub mod cli;
pub mod cohort;
pub mod eval;
pub mod model;
pub mod signal;
pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor, TensorError, Var};

/// Fans one global seed out into independent per-purpose streams (FNV-1a of
/// the seed bytes and a tag). Used everywhere a component needs its own RNG
/// so that a single seed reproduces a whole run.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in base.to_le_bytes().iter().chain(tag.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Order-preserving map over work items, parallel when the `parallel`
/// feature is on. Outputs are collected in input order, so results are
/// bit-identical regardless of thread count.
pub(crate) mod par {
    #[cfg(feature = "parallel")]
    pub fn map<T: Sync, U: Send, F: Fn(&T) -> U + Send + Sync>(items: &[T], f: F) -> Vec<U> {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }

    #[cfg(not(feature = "parallel"))]
    pub fn map<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
        items.iter().map(f).collect()
    }
}
