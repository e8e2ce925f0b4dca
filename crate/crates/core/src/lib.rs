//! Specular billiards, boundary transport, collision-operator oracles and
//! constructive lower-bound certificates for the Boltzmann equation.

pub mod certificate;
pub mod characteristics;
pub mod collision_oracle;
pub mod geometry;
pub mod grazing;
pub mod kernel;
pub mod kinetic_sim;
pub mod quadrature;
pub mod transport;
pub mod vector;

pub use characteristics::{BoundaryClass, ReboundSequence, Resolution};
pub use geometry::{Domain, GeometryError};
