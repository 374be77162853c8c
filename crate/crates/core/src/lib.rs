//! Synthetic-HMM benchmark for tracing state dynamics in a tiny transformer.
//!
//! The crate generates HMM families with exact Bayesian ground truth
//! ([`hmm`]), trains a two-block causal transformer on their emissions
//! ([`transformer`], built on [`nn`]), abstracts its activations into
//! discrete states ([`extraction`]), scores those states against the true
//! process ([`analysis`]) and tests their causal role by patching state
//! centroids into the residual stream ([`forcing`]).

pub mod analysis;
pub mod array_io;
pub mod error;
pub mod extraction;
pub mod forcing;
pub mod hmm;
pub mod matrix;
pub mod nn;
pub mod rng;
pub mod transformer;

pub use error::{MctError, Result};
pub use hmm::{Family, HmmSpec, SequenceBatch};
pub use matrix::Matrix;
pub use transformer::{ActivationCapture, CapturePoint, Model, ModelConfig, TrainHyper, TrainReport};
