//! Dense numerics for the benchmark transformer: a float abstraction over
//! `f32`/`f64`, a closed set of primitives with hand-written backward rules,
//! and a named parameter store with Adam.

pub mod ops;
mod params;
mod scalar;
mod tensor;

pub use params::{AdamConfig, Param, ParamStore, CHECKPOINT_MAGIC};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
