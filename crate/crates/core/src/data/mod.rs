//! Synthetic scene generation, trajectory representations and dataset files.

mod balance;
mod generate;
mod io;
mod scene;
mod spline;
mod types;

pub use balance::{balance_by_mode, balance_over_modes};
pub use generate::{
    allocate_counts, generate, generate_bimodal, generate_branching, ground_truth_mode_probs, scale_about,
};
pub use io::{load_dataset, save_dataset, write_atomic, Dataset, DATASET_FORMAT_VERSION};
pub use scene::{bundled_scene, ModeTemplate, SceneKind, SceneSpec, Scaling, BUNDLED_SCENES};
pub use spline::{resample_unit_steps, ClampedSpline};
pub use types::{flatten, from_displacements, to_displacements, DisplacementSeries, Point, Situation, Trajectory};
pub(crate) use generate::same_past;
pub(crate) use types::all_finite;
