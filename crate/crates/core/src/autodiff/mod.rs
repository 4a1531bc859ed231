//! Minimal reverse-mode differentiation: parameter storage, a recording
//! tape, an Adam optimizer, finite-difference checking and checkpoints.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;

pub use checkpoint::{Checkpoint, NamedArray, OptimizerState, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{central_difference, finite_diff_check, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, ParamTensor};
pub use tape::{CustomBackward, Gradients, Graph, Var};

pub(crate) use tape::sigmoid;
