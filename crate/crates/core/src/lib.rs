//! Token merging for the global attention of multi-frame transformers.
//!
//! The crate builds a synthetic alternating-attention model (frame attention
//! followed by global attention in every block) and accelerates its global
//! attention by merging redundant tokens:
//!
//! * [`partitioner`] splits tokens into salient / dst / src sets, either with
//!   naive baselines or the frame-aware reference + salient + uniform-region
//!   composition;
//! * [`mergecore`] matches every src token to its most similar dst token,
//!   averages each group, and replicates results back after attention;
//! * [`attnstack`] runs the model in dense or merged mode, keeping only the
//!   requested block outputs;
//! * [`profiler`] and [`analyzer`] measure time, FLOPs and attention-map
//!   redundancy.

pub mod analyzer;
pub mod attnstack;
pub mod error;
pub mod mergecore;
pub mod numkernel;
pub mod partitioner;
pub mod profiler;
pub mod synth;
pub mod tokenmodel;
pub mod viz;

pub use attnstack::{
    forward, CapturedAttention, ForwardOptions, ForwardOutput, Mode, ModelConfig, ModelWeights,
};
pub use error::{Error, Result};
pub use mergecore::{match_tokens, merge, unmerge, MergeMap};
pub use numkernel::{flops, Matrix, Real};
pub use partitioner::{
    build_partition, MergeConfig, MergeRule, SalientMode, Strategy, StrategyVariant,
};
pub use profiler::{speedup, BenchOptions, BenchSize, Component, ProfileReport};
pub use tokenmodel::{FrameLayout, Partition, Role, TokenSequence};

/// Relative L2 distance `‖a − b‖ / ‖b‖` (0 when both are zero).
pub fn relative_l2(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let base = b.frobenius_norm();
    Ok(if base == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / base
    })
}
