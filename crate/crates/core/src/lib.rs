//! Grid-tied inverter under virtual-synchronous-generator control, with a
//! conventional integrator + droop voltage loop and an online-trained
//! heuristic dynamic programming (HDP) voltage controller.
//!
//! The numeric modules are generic over [`Real`]; the aliases below fix the
//! scalar to `f64`, which is what the simulator and CLI use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod hdp;
pub mod mlp;
pub mod plant;
pub mod scalar;
pub mod sim;
pub mod vsg;

pub use error::{Error, Result};
pub use scalar::Real;

pub type LineParams = plant::LineParams<f64>;
pub type GridParams = plant::GridParams<f64>;
pub type Impedance = plant::Impedance<f64>;
pub type PowerPair = plant::PowerPair<f64>;
pub type VsgParams = vsg::VsgParams<f64>;
pub type VsgState = vsg::VsgState<f64>;
pub type Setpoints = vsg::Setpoints<f64>;
pub type Mlp = mlp::Mlp<f64>;
pub type HdpController = hdp::HdpController<f64>;
pub type HdpConfig = hdp::HdpConfig<f64>;
pub type UtilityWeights = hdp::UtilityWeights<f64>;
pub type Scenario = sim::Scenario<f64>;
pub type EpisodeTrace = sim::EpisodeTrace<f64>;
pub type TraceRecord = sim::TraceRecord<f64>;
pub type Controller = sim::Controller<f64>;
pub type TrainConfig = sim::TrainConfig<f64>;
pub type StepMetrics = sim::StepMetrics<f64>;
