//! Information-bottleneck fine-tuning laboratory.

pub mod bottleneck;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod memorization;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod stackcalc;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod transformer;
pub mod vocab;

pub use error::{Error, Result, TensorError};
pub use params::Params;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
pub use transformer::{Decoder, ForwardResult, Sequence, TransformerConfig, TransformerModel};
