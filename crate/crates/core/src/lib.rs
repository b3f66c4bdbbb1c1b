//! Typed counterfactual selective-intervention pretraining (CSIP) for
//! five-way legislative conflict classification, together with the
//! seed-as-unit confirmatory analysis pipeline used to evaluate it.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense tensors, a reverse-mode tape, initializers,
//!   gradient checking and global-norm clipping.
//! * [`encoder`]: the hashing tokenizer, pair-sequence construction and the
//!   toy pair encoder.
//! * [`heads`]: typed factor head with its monotone complement, the fresh
//!   five-way head and the concatenation baseline head.
//! * [`losses`]: CSIP losses, class-weighted cross-entropy, the replay loss.
//! * [`data`]: record schema, ingest, triplet construction, synthetic corpora.
//! * [`training`]: AdamW, the warmup/decay schedule, Stage 1 and both
//!   Stage 2 transfers, the baseline trainer and test prediction.
//! * [`metrics`], [`stats`], [`stratify`]: evaluation and inference.
//! * [`orchestrator`]: the staged campaign state machine.
//!
//! Neural code is generic over the scalar type (see [`Scalar`]); the
//! aliases at the crate root fix it to `f64`, which is what training and
//! every published number use.

pub mod data;
pub mod encoder;
mod error;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod orchestrator;
pub mod rng;
mod scalar;
pub mod stats;
pub mod stratify;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense tensor in the default precision.
pub type Tensor = numerics::Tensor<f64>;
/// Dense tensor in single precision.
pub type Tensor32 = numerics::Tensor<f32>;
/// Parameter store in the default precision.
pub type ParamStore = numerics::ParamStore<f64>;
/// Gradient slots in the default precision.
pub type Gradients = numerics::Gradients<f64>;
/// Computation graph in the default precision.
pub type Graph<'a> = numerics::Graph<'a, f64>;
/// Full model (encoder plus whichever heads a cell carries) in `f64`.
pub type Model = training::Model<f64>;
/// Single-precision model, useful for inference-only experiments.
pub type Model32 = training::Model<f32>;
/// Typed factor state in `f64`.
pub type FactorState = heads::FactorState<f64>;
