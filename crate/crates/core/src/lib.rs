//! Edge-gated depth and normal regularization for sparse-view radiance
//! fields: differentiable volume rendering, edge extraction, patch losses,
//! training, synthetic ground truth and evaluation.

pub mod dataset;
pub mod edgemap;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod image_io;
pub mod reg;
pub mod renderer;
pub mod scalar;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Vec3f64 = geometry::Vec3<f64>;
pub type Vec3f32 = geometry::Vec3<f32>;
pub type Ray64 = geometry::Ray<f64>;
pub type Ray32 = geometry::Ray<f32>;
pub type Camera64 = geometry::Camera<f64>;
pub type Camera32 = geometry::Camera<f32>;
pub type Aabb64 = geometry::Aabb<f64>;
pub type Aabb32 = geometry::Aabb<f32>;
pub type FieldParams64 = field::FieldParams<f64>;
pub type FieldParams32 = field::FieldParams<f32>;
pub type RenderResult64 = renderer::RenderResult<f64>;
pub type RenderResult32 = renderer::RenderResult<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
