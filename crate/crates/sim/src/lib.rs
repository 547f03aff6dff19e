//! Procedural digital twin of a rearing chamber: an agent moves about the
//! chamber, looks at one of two displays and a small rasterizer records
//! what it sees as temporally ordered RGB frames.

pub mod agent;
pub mod audit;
pub mod chamber;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod render;

pub use agent::{sample_trajectory, AgentState, MotionConfig, TrajectoryPlanner};
pub use audit::{pixel_distance_audit, AuditReport};
pub use chamber::{
    ChamberSpec, Condition, ObjectId, ObjectSpec, ViewpointRange, Wall, NUM_VIEWPOINTS, REARING_VIEWPOINTS,
};
pub use dataset::{
    generate_blank, generate_dataset, generate_probe_set, generate_probe_subset, DatasetConfig, DatasetKind,
    EpisodeDataset, Frame, FrameMeta, Manifest,
};
pub use error::{Result, SimError};
pub use render::{Camera, DisplayedObject, RenderConfig, Renderer};
