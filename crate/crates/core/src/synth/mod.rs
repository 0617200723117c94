//! Procedural ground truth: analytic SDF scenes, the occupancy oracle and a
//! sphere-tracing stereo renderer.

mod render;
mod scene;

pub use render::{render_stereo, GrayImage, RenderSettings, RenderedPair};
pub use scene::{
    augment_scene, fit_ball, random_scene, AugmentConfig, Light, Primitive, SceneGenConfig,
    SdfScene,
};
