//! Time-frequency speech enhancement with interchangeable long-context
//! backbones (Transformer, Conformer, Mamba, mLSTM) and a benchmark harness.
//!
//! The pipeline is the classic masking one: STFT magnitude in, a
//! sigmoid-bounded real mask out, applied to the noisy spectrum and inverted
//! with the noisy phase.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod autograd;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod params;
pub mod posenc;
pub mod ssm;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod xlstm;

pub use autograd::Var;
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
