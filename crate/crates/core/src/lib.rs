//! Risk-constrained structured-feedback damping control for power networks.
//!
//! The crate builds linearized dynamic models of networks of synchronous
//! generators (SGs) and voltage source converters (VSCs), simulates the
//! closed loop under communication delays and packet loss, and trains sparse
//! feedback gains with a stochastic gradient-descent/max-oracle loop driven
//! by zero-order policy gradients, subject to a mean-variance risk constraint
//! on the state cost.
//!
//! Modules follow the pipeline:
//!
//! * [`netmodel`] — network description → continuous linearization → exact
//!   zero-order-hold discretization,
//! * [`comms`] — communication graph, gain sparsity structure, delay and
//!   packet-loss channels,
//! * [`sim`] — closed-loop rollouts and per-trajectory cost functionals,
//! * [`risklqr`] — analytic (Lyapunov) and Monte-Carlo evaluators for the
//!   LQR objective, the risk functional, the Lagrangian and its max-oracle,
//! * [`sgdmax`] — sparse sphere sampling, gradient estimation and the
//!   training loop,
//! * [`analysis`] — modal reports and multi-scenario statistical sweeps.
//!
//! All numerics are generic over the scalar type through the [`Real`] trait;
//! `f64` aliases for the main types are exported at the crate root.

// Validation guards use negated comparisons (`!(x > 0)`) so NaN inputs fail
// them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod comms;
pub mod netmodel;
pub mod risklqr;
pub mod sgdmax;
pub mod sim;
pub mod util;

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the numerical core is generic over.
///
/// In practice this is `f32` or `f64`; the trait exists so the whole pipeline
/// can be instantiated at either precision.
pub trait Real:
    nalgebra::RealField + FromPrimitive + ToPrimitive + std::iter::Sum + Copy + Default
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` constant into the working scalar type.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite f64 constant")
}

pub use util::{mix, split_seed};

// Concrete aliases for the common double-precision instantiation.
pub type LinearSystemF64 = netmodel::LinearSystem<f64>;
pub type DiscreteSystemF64 = netmodel::DiscreteSystem<f64>;
pub type NetworkDescriptionF64 = netmodel::NetworkDescription<f64>;
pub type OperatingPointF64 = netmodel::OperatingPoint<f64>;
pub type NoiseModelF64 = sim::NoiseModel<f64>;
pub type ScenarioConfigF64 = sim::ScenarioConfig<f64>;
pub type TrajectoryF64 = sim::Trajectory<f64>;
pub type CostWeightsF64 = risklqr::CostWeights<f64>;
pub type NoiseMomentsF64 = risklqr::NoiseMoments<f64>;
pub type GainMatrixF64 = risklqr::GainMatrix<f64>;
pub type RiskConfigF64 = risklqr::RiskConfig<f64>;
pub type TrainConfigF64 = sgdmax::TrainConfig<f64>;
pub type TrainLogF64 = sgdmax::TrainLog<f64>;
pub type ZopgConfigF64 = sgdmax::ZopgConfig<f64>;
pub type ModeReportF64 = analysis::ModeReport<f64>;
