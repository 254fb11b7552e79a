//! Differentiable multiphysics inversion at desk scale.
//!
//! Wave physics (acoustic FWI with exact discrete adjoints), two-phase Darcy
//! flow with a discrete adjoint, patchy-saturation rock physics, an
//! invertible coupling-flow prior and a Fourier neural operator surrogate,
//! all chained through a reverse-mode engine with registered pullback rules.

pub mod adgraph;
pub mod error;
pub mod experiments;
pub mod fieldio;
pub mod flow;
pub mod linop;
pub mod optim;
pub mod priorflow;
pub mod rock;
pub mod surrogate;
pub mod wave;

pub use adgraph::{Cotangent, Input, PullbackRule, Registry, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use fieldio::{Field, RngStream};
pub use linop::{LinearOperator, TestReport};
pub use experiments::{Case, ExperimentConfig, RunResult, Scenario};
pub use flow::{FlowSchedule, PermeabilityField, SaturationSeries};
pub use optim::Trajectory;
pub use priorflow::CouplingFlowParams;
pub use surrogate::FnoWeights;
pub use wave::{AcquisitionGeometry, ShotRecord, SlownessModel, Wavelet};
