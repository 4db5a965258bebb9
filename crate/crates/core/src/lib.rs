//! Constraint-conditioned floor plan generation with a masked diffusion model.

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geom;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod plan;
pub mod postprocess;
pub mod sampler;
pub mod trainer;

pub use diffusion::{Schedule, ScheduleConfig, SigmaMode};
pub use error::{Error, Result};
pub use geom::{Point, Rect};
pub use losses::{LossParts, LossWeights};
pub use masking::{apply_mask, build_mask, ConditionMask, Mode};
pub use plan::{BoundaryCondition, FloorPlan, PlanTensor, Room, RoomType};
