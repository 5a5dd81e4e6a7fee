//! Entropy-dual variational solvers for conservative nonlinear PDEs on
//! periodic domains: N-function toolkit, pseudospectral operators, the four
//! model systems, a strong solver for the sharp variable, the cone-constrained
//! dual maximization, and consistency checks tying them together.

// `!(x >= 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod consistency;
pub mod dual;
pub mod entropy;
pub mod grid;
pub mod optim;
pub mod strong;
pub mod sym;
pub mod systems;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use entropy::{EntropySpec, Real};
pub use grid::{FieldShape, GridField, PeriodicGrid};
pub use strong::{Trajectory, WeightSchedule};
pub use systems::{make_system, SystemParams, SystemSpec};

pub type Quadratic = entropy::Quadratic<f64>;
pub type Quadratic32 = entropy::Quadratic<f32>;
pub type GkdvEntropy = entropy::GkdvEntropy<f64>;
pub type GkdvEntropy32 = entropy::GkdvEntropy<f32>;
pub type RadialEntropy = entropy::RadialEntropy<f64>;
pub type RadialEntropy32 = entropy::RadialEntropy<f32>;
pub type SampledFunction = entropy::SampledFunction<f64>;
pub type SampledFunction32 = entropy::SampledFunction<f32>;
