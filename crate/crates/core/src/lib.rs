//! Task distances from the geometry of training: the Fisher-Rao length of a
//! classifier's weight trajectory while the task is transported from source
//! to target, plus reference distances and the Mantel test.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`, which the CLI uses.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod cli;
pub mod coupled;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod net;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tasks;
pub mod transport;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Task = tasks::LabeledTask<f64>;
pub type Batch = tasks::InterpolatedBatch<f64>;
pub type Net = net::Mlp<f64>;
pub type Train = net::TrainConfig<f64>;
pub type Coupling64 = transport::Coupling<f64>;
pub type Cost64 = transport::CostMatrix<f64>;
pub type Trajectory = geometry::WeightTrajectory<f64>;
pub type Coupled = coupled::CoupledConfig<f64>;
pub type Distances = stats::DistanceMatrix<f64>;
