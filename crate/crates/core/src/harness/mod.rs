//! Procedural ground truth: ray-cast scenes, ring rigs, depth degradation
//! and dataset emission.

pub mod dataset;
pub mod degrade;
pub mod performer;
pub mod render;
pub mod scene;

pub use dataset::{emit_dataset, generate_sample, read_dataset, read_sample, DatasetSpec, SampleData, ViewData};
pub use degrade::{degrade_depth, DegradeParams, DegradedDepth};
pub use performer::performer;
pub use render::{cast_pixel, make_rig, raycast, GroundTruth, RigSpec};
pub use scene::{Hit, Pattern, Primitive, RigidMotion, SceneDescription, Shape, Texture};
