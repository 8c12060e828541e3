//! Optimization of time-dependent control pulses that realize unitary gates on a
//! single multi-level qudit.
//!
//! The state is propagated in a real-valued split (u, v) = (Re psi, -Im psi) with a
//! partitioned Stormer-Verlet scheme whose implicit stages make every step exactly
//! reversible in exact arithmetic. Gradients of the discrete objective come from the
//! discrete adjoint of that scheme, so they match the objective to machine precision
//! at any step size. Controls are quadratic B-spline envelopes mixed onto carrier
//! tones; the optimizer is a projected L-BFGS with box bounds on the coefficients.
//!
//! Internal units are radians per nanosecond for all angular frequencies and
//! nanoseconds for time. Conversions from conventional GHz/MHz inputs happen at the
//! configuration boundary, not here.

pub mod adjoint;
pub mod analysis;
pub mod controls;
pub mod error;
pub mod integrator;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optimizer;

pub use error::{Error, Result};
