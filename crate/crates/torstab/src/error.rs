use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid profile: {0}")]
    Profile(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("point outside the torus cross-section: r = {0}")]
    OutsideDomain(f64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("equilibrium solve failed: {0}")]
    EquilibriumSolve(String),

    #[error("operator assembly failed: {0}")]
    Assembly(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("mode search failed: {0}")]
    ModeSearch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
