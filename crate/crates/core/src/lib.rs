//! Differentiable recursive ray tracing for transparent objects.
//!
//! The crate reconstructs a triangle mesh, a global index of refraction and a
//! volumetric absorption field from posed multi-view images and object masks.
//! Geometry is initialized from silhouettes (`geominit`), the far-field
//! environment is fitted from background pixels (`environ`), and the three
//! parameter blocks are then refined jointly by a deterministic specular ray
//! tracer (`tracer`) whose recorded paths are differentiated analytically
//! (`gradengine`).

pub mod camera;
pub mod config;
pub mod dataset;
pub mod environ;
pub mod error;
pub mod geominit;
pub mod gradengine;
pub mod imageio;
pub mod losses;
pub mod math;
pub mod medium;
pub mod mesh;
pub mod metrics;
pub mod optics;
pub mod optimize;
pub mod parallel;
pub mod scenegen;
pub mod tracer;

pub use error::{Error, Result};
pub use math::{Ray, Rgb, Vec3};
