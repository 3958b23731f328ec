//! Closed-loop equilibria of time-inconsistent linear-quadratic mean-field
//! control problems with common noise.
//!
//! The equilibrium feedback is built from the solution of a non-local
//! Riccati system ([`riccati`]) through the quadratic value ansatz
//! ([`equilibrium`]). The equilibrium property is checked analytically via
//! the first-order functional and statistically by simulating the
//! conditional McKean-Vlasov dynamics with interacting particles
//! ([`mckv_sim`], [`verifier`]). [`examples`] holds model builders and
//! closed-form oracles for three reference problems.

pub mod equilibrium;
pub mod examples;
pub mod interp;
pub mod linalg;
pub mod mckv_sim;
pub mod model;
pub mod riccati;
pub mod verifier;

pub use equilibrium::{AffinePerturbation, FeedbackStrategy, MeasureMoments};
pub use model::{load_model, parse_model, LQModel, ModelError};
pub use riccati::{solve_fixed_point, solve_partition, FixedPointOptions, RiccatiError, RiccatiSolution, TriangularGrid};
