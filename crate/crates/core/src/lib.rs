//! Scene-layout generation with a conditional set-diffusion model.
//!
//! The crate generates fixed-size sets of oriented 3D object boxes conditioned
//! on contact-human boxes, a floor plan and a free-space mask. Sampling can be
//! steered by gradient-based spatial collision guidance, and a calibration
//! pipeline repairs human-object interpenetration in training corpora.

pub mod calibration;
pub mod diffusion;
pub mod error;
pub mod evalsuite;
pub mod geometry;
pub mod guidance;
pub mod pipeline;
pub mod scene;
pub mod synthdata;
pub mod tool_io;

pub use error::Error;
pub use scene::{
    ConditionSet, ContactBox, GridMask, InteractionMode, NormalizationStats, ObjectInstance,
    RoomType, Scene, SceneConfig, SceneTensor,
};
