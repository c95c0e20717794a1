//! Cut finite element toolkit for the Bernoulli free boundary problem in 2D.
//!
//! The free boundary is carried by a P1 level set on a fixed criss-cross
//! background mesh. Each outer iteration solves the CutFEM primal and dual
//! Poisson problems (Nitsche boundary conditions, ghost-penalty
//! stabilization), assembles the volume form of the shape derivative,
//! computes an H1 Riesz descent velocity on the box, and advects the level
//! set with stabilized Crank-Nicolson transport before reinitializing the
//! signed-distance property by sweeping.

pub mod analysis;
pub mod cli;
pub mod cutquad;
pub mod driver;
pub mod fem;
pub mod geom;
pub mod levelset;
pub mod linsolve;
pub mod mesh;
pub mod shapegrad;
pub mod snapshot;
pub mod transport;

pub use geom::Vec2;
pub use levelset::{classify, CutGeometry, LevelSet};
pub use mesh::{build_background_mesh, BackgroundMesh};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point ({x}, {y}) lies outside the background domain")]
    OutOfDomain { x: f64, y: f64 },

    #[error("level set defines an empty domain")]
    EmptyDomain,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("iterative solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("velocity field is stationary (|beta'| = {norm:.3e})")]
    StationaryVelocity { norm: f64 },

    #[error("shape gradient is not a descent direction (g.beta = {0:.3e})")]
    NonDescent(f64),

    #[error("objective is not positive (L = {0:.3e})")]
    DegenerateObjective(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
