//! Energy- and Casimir-conserving one-step integrators for Poisson systems
//! dy/dt = B(y) grad H(y) with skew-symmetric B(y).
//!
//! The PHBVM(k, s) family combines a degree-s polynomial stage with a k-node
//! Gauss-Legendre quadrature (k >= s). Each step conserves the Hamiltonian up
//! to O(h^{2k+1}) (exactly, for polynomial H of degree <= 2k/s) while keeping
//! order 2s; for k = s the method coincides with the s-stage Gauss
//! collocation method. The enhanced EPHBVM(k, s) variant additionally
//! conserves Casimir invariants by perturbing the vector field with a scalar
//! multiple of a fixed skew-symmetric matrix.
//!
//! Crate layout:
//! - [`legendre`]: orthonormal shifted Legendre basis and Gauss rules;
//! - [`tableau`]: per-method matrices and the blended-iteration parameter;
//! - [`poisson`]: the [`poisson::PoissonSystem`] abstraction and benchmark
//!   problems;
//! - [`solve`]: one PHBVM step with fixed-point, simplified Newton and
//!   blended nonlinear solvers;
//! - [`casimir`]: the Casimir-conserving EPHBVM step;
//! - [`driver`]: multi-step integration, convergence tables and long-time
//!   error-growth studies.

pub mod casimir;
pub mod driver;
pub mod error;
pub mod legendre;
pub mod poisson;
pub mod solve;
pub mod tableau;

pub use error::{Error, Result};
pub use legendre::QuadratureRule;
pub use tableau::{build_tableau, MethodTableau};
