//! Space-time Galerkin boundary elements for the heat equation in 3D.
//!
//! The temporal integrals of the heat kernel are evaluated in closed form,
//! the spatial ones by regular and Duffy-type quadrature. All discrete
//! operators are lower-triangular block Toeplitz matrices in time.
//!
//! The numerical core is generic over [`Real`]; the aliases below fix it to
//! `f64`.

pub mod assembly;
pub mod error;
pub mod field;
pub mod kernels;
pub mod mesh;
pub mod oracle;
pub mod quadrature;
pub mod scalar;
pub mod solver;
pub mod study;
pub mod verify;

pub use scalar::{Real, Vec3};

pub type Mesh = mesh::SurfaceMesh<f64>;
pub type Grid = mesh::TimeGrid<f64>;
pub type Params = kernels::KernelParams<f64>;
pub type Matrix = assembly::BlockToeplitzMatrix<f64>;
pub type Vector = assembly::SpaceTimeVector<f64>;
