//! Spectral stability of hot plasmas confined in a solid torus.
//!
//! The crate builds toroidally symmetric Vlasov-Maxwell equilibria inside the
//! torus `(a - sqrt(x1^2+x2^2))^2 + x3^2 < 1` (minor radius 1, major radius
//! `a > 1`), assembles the self-adjoint stability operator `L0` from
//! particle-trajectory averages, renders a spectral verdict (`L0 >= 0` means
//! no growing mode), and, in the unstable case, locates a purely growing mode
//! by eigenvalue-count continuation on a truncated operator matrix.
//!
//! Pipeline, bottom to top:
//!
//! * [`geometry`] — cross-section grid, toroidal-measure inner products,
//!   divergence-form Laplacians, velocity quadrature;
//! * [`profiles`] — the equilibrium ansatz families `mu(e, p)` and their
//!   hypothesis checks;
//! * [`equilibrium`] — Picard solution of the equilibrium elliptic system and
//!   smooth field reconstruction;
//! * [`trajectories`] — specularly reflecting characteristics, exponential
//!   (`Q_lambda`) and ergodic averages along them;
//! * [`projections`] — the kernel projections `P` (closed form in the
//!   homogeneous case, trajectory tables in general);
//! * [`operators`] — dense assembly of the operator family and the
//!   divergence-free vector basis;
//! * [`stability`] — the verdict and the scaling scan;
//! * [`modefinder`] — growing-mode continuation and reconstruction.

pub mod config;
pub mod equilibrium;
pub mod geometry;
pub mod modefinder;
pub mod operators;
pub mod profiles;
pub mod projections;
pub mod stability;
pub mod trajectories;

mod error;
pub use error::{Error, Result};
