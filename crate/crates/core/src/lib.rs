//! Differentiable 2D Gaussian splatting with planetary reflectance models.

pub mod autograd;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod io;
pub mod ply;
pub mod rasterizer;
pub mod reflectance;
pub mod spatial;
pub mod splats;
pub mod synthscene;
pub mod trainer;
