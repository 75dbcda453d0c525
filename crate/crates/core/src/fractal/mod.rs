//! Recursive wide-to-narrow band generation: an `n`-adic interval tree over
//! the output channels, walked level by level with one atomic generator per
//! level.

mod engine;
mod plan;

pub use engine::{
    band_average, one_shot_baseline, reconstruct, rgb_mean_plane, select_references, AtomicModel,
    BoundGenerator, Conditioning, Frn, FrnConfig, LevelState, Reconstruction,
};
pub use plan::{build_plan, nearest_intervals, Interval, Invocation, LevelSpec, RecursionPlan};
