//! Automatic calibration of superconducting transmon qubits against a
//! simulated device: Rabi-based bias search, gate fine-tuning, cross-resonance
//! CNOT calibration and randomized benchmarking.
//!
//! The numeric core is generic over [`Real`]; the aliases below fix it to
//! `f64`, which is what the simulator and protocols use.

pub mod autorabi;
pub mod clustering;
pub mod error;
pub mod fitters;
pub mod linalg;
pub mod optimizer;
pub mod pipeline;
pub mod protocols;
pub mod qmatrix;
pub mod rb;
pub mod scalar;
pub mod simdev;

pub use error::{Error, Result};
pub use scalar::Real;

pub type CMat = qmatrix::CMat<f64>;
pub type Unitary = qmatrix::Unitary<f64>;
pub type PureState = qmatrix::PureState<f64>;
pub type CnotAngles = qmatrix::CnotAngles<f64>;
pub type IqPoint = clustering::IqPoint<f64>;
pub type GmmModel = clustering::GmmModel<f64>;
pub type ClusterReport = clustering::ClusterReport<f64>;
pub type RabiFit = fitters::RabiFit<f64>;
pub type SineFit = fitters::SineFit<f64>;
pub type DecayFit = fitters::DecayFit<f64>;
pub type ParabolaFit = fitters::ParabolaFit<f64>;
pub type OptProblem = optimizer::OptProblem<f64>;
pub type OptTrace = optimizer::OptTrace<f64>;
pub type LossConfig = autorabi::LossConfig<f64>;
pub type LossBreakdown = autorabi::LossBreakdown<f64>;
