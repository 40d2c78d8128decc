//! Online identification of regime-switching dynamics by causation-entropy
//! boosting.
//!
//! A reference sparse model is monitored batch by batch. Residual dynamics
//! are screened with a Gaussian causation-entropy matrix; a stable
//! structural change triggers a least-squares fit of a residual model that
//! is added to the reference. Partially observed conditional-Gaussian
//! systems are handled by sampling the hidden states from their smoother
//! posterior.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod assimilate;
pub mod basis;
pub mod boost;
pub mod centropy;
pub mod error;
pub mod linalg;
pub mod models;
pub mod timeseries;

pub use assimilate::{
    augment_batch, backward_kernel, backward_smoother, batch_seed, forward_filter, forward_filter_masked,
    posterior_sample, AugmentScheme, BackwardKernel, ConditionalGaussianSpec, FilterOutput, GaussianState,
    SampledTrajectory, SmootherOutput,
};
pub use basis::{BasisFunction, BasisLibrary, Monomial, Stencil};
pub use boost::{
    detect, fit_residual, residual_dynamics, run_online, DetectionReport, DetectorConfig, Model, OnlineDetector,
    ResidualModel, TargetMode,
};
pub use centropy::{
    compute_cem, gaussian_causation_entropy, threshold, AbsoluteFloor, AggregationState, BinaryCEM, CEMatrix,
    StabilityScope, StablePattern, ThresholdMode, ThresholdPolicy,
};
pub use error::{Error, Result};
pub use models::{integrate, RegimeSchedule, SdeSystem, SimulationConfig};
pub use timeseries::{forward_difference, make_batches, Batch, DerivativeSeries, Trajectory};
