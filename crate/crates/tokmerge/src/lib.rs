//! Token-redundancy reduction for transformer encoders.
//!
//! The crate bundles everything needed to train and inspect token-merged
//! encoders at desk scale:
//!
//! * [`tensor`]: dense row-major arrays with the handful of linear-algebra,
//!   elementwise, reduction and selection primitives the rest of the crate
//!   consumes.
//! * [`autodiff`]: a tape-based reverse-mode engine over those primitives,
//!   with `stop_gradient` and a straight-through passthrough as first-class
//!   operations.
//! * [`adapters`]: LoRA, AdaptFormer and key-refinement adapters plus the
//!   trainable/frozen parameter partition.
//! * [`merging`]: stripe and checkerboard token splits, bipartite soft
//!   matching, bipartite differentiable matching with straight-through
//!   gradients, and the pooling baselines.
//! * [`vit`]: a small configurable ViT encoder that hosts the adapters and a
//!   merge module at a chosen layer.
//! * [`flops`]: a closed-form multiply-accumulate model of encoder cost under
//!   token-reduction schedules.
//! * [`trainer`]: AdamW with warmup plus cosine decay, driving the frozen
//!   backbone / trainable adapter split.
//! * [`dataset`]: a synthetic separable task generator and a tiny binary
//!   image-dataset format.
//! * [`checkpoint`]: adapter-only model persistence.
//! * [`cli`]: the `train` / `eval` / `flops` / `inspect-merge` entry points.

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod flops;
pub mod merging;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Scalar element type of every tensor in the crate.
///
/// Defaults to `f64`; build with the `f32` feature for single precision.
/// The finite-difference gradient checks in the test suite assume the
/// double-precision default.
#[cfg(not(feature = "f32"))]
pub type Elem = f64;
#[cfg(feature = "f32")]
pub type Elem = f32;
