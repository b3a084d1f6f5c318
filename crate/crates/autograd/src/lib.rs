//! Dense reverse-mode autodiff with transformer blocks and Adam, sized for
//! CPU training of small models.

pub mod attention;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod transformer;

pub use attention::{AttentionBlock, AttentionLayout};
pub use error::NnError;
pub use graph::{Gradients, Graph, Var, ZERO_NORM_COSINES};
pub use optim::{Adam, AdamConfig, StepOutcome};
pub use params::{Init, ParamId, ParameterStore};
pub use tensor::{Scalar, Tensor};
pub use transformer::{Decoder, Encoder, Linear, TransformerConfig};
