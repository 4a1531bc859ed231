//! Conditional normalizing flow over trajectory encodings.

mod model;
mod spline;

pub use model::{FlowConfig, FlowMetadata, FlowModel, PastInput, Standardizer, FLOW_COMPONENT};
pub use spline::{raw_params_per_dim, rqs_forward, rqs_inverse, SplineKnots, MIN_BIN_HEIGHT, MIN_BIN_WIDTH, MIN_DERIVATIVE};
