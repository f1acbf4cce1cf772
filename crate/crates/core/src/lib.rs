//! Feature-preserving normal estimation for point clouds and triangle meshes.
//!
//! Normals of similar local structures are stacked into a matrix, which is
//! denoised by weighted nuclear-norm minimization. Positions are then moved
//! onto the tangent planes of the recovered normals.
//!
//! ```
//! use wnnm_normals::{eval, normals::{estimate_normals, FilterConfig}};
//!
//! let truth = eval::make_shape(eval::ShapeKind::Plane, 400, 1).unwrap();
//! let noisy = eval::add_noise(&truth, &eval::NoiseSpec::isotropic(0.002, 2)).unwrap();
//! let cfg = FilterConfig { k_local: 20, k_non: 40, n_nor: 2, ..FilterConfig::default() };
//! let field = estimate_normals(&noisy, &cfg).unwrap();
//! assert!(eval::msae(&field.normals, truth.normals()).unwrap() < 1e-3);
//! ```

pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod lowrank;
pub mod normals;
pub mod position;
pub mod structures;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{Error, Result};
pub use geometry::{NeighborTable, PointCloud, TriangleMesh};
pub use normals::{FilterConfig, NormalField};
