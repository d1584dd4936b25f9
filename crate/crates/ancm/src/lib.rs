//! Contraction-metric tooling for certified nonlinear adaptive control.
//!
//! The pipeline: describe a control-affine (optionally parametric) system,
//! synthesize optimal contraction metrics over a state grid by solving small
//! dense semidefinite programs, regress the samples with a multilayer
//! perceptron that is positive-definite by construction, and close the loop
//! with the adaptive control laws whose gain conditions and tracking-error
//! envelopes are checked numerically. The cart-pole benchmark and its two
//! scenarios (unknown drag coefficients, unknown dynamics fitted by a small
//! network) live in [`sim`], together with RK4 simulation, an iLQR baseline,
//! and CSV/SVG export.

pub mod config;
pub mod control;
pub mod dynamics;
pub mod lmi;
pub mod net;
pub mod sim;
pub mod synthesis;

pub use config::KvConfig;
pub use control::{
    check_gain_condition, tracking_error_bound, CertBounds, ControllerConfig, GainCertificate,
    GainKind, Metric,
};
pub use dynamics::{
    AffineUncertainSystem, BasisFunctionModel, CartPole, DomainBox, LagrangianSystem,
    ParametricSystem, SystemModel,
};
pub use lmi::{solve_sdp, LmiProblem, SdpSolution, SdpStatus};
pub use net::{LearningErrorReport, MetricNet, TrainConfig};
pub use synthesis::{MetricSample, SynthesisConfig};
