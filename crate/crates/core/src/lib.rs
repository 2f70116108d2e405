//! Reflected anticipated BSDEs driven by a Brownian motion and a single
//! default jump, solved exactly on a recombining lattice.

pub mod comparison;
pub mod driver;
pub mod generate;
pub mod lattice;
pub mod oracle;
pub mod par;
pub mod scenario;
pub mod solver;
pub mod stopping;
pub mod validate;

pub use lattice::{DefaultLattice, IntensitySpec, NodeId, ProcessField};
pub use par::Exec;
pub use scenario::{Scenario, ScenarioBuilder, ScenarioError, Scheme};
pub use solver::{solve_backward, Solution, SolveError};
