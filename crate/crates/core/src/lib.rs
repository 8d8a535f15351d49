//! Nanbu-type jump-diffusion particle system for the spatially homogeneous
//! Boltzmann equation with moderately soft potentials and grazing collisions,
//! plus estimators for the functionals that control it.
//!
//! The pieces:
//! - [`kernel`]: angular kernel, deviation-angle inverse, collision map and
//!   jump coefficient.
//! - [`gate`]: mollifier, smooth cutoffs and the regularity gate `α`.
//! - [`particles`]: ensembles, the time-stepped scheme and runs.
//! - [`diagnostics`]: moments, entropy, fractional Fisher information,
//!   pairwise singular moments, Lᵖ norms and their inequality checks.
//! - [`transport`]: exact and sliced Wasserstein distances.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod gate;
pub mod identities;
pub mod kernel;
pub mod particles;
pub mod quadrature;
pub mod rng;
pub mod sort;
pub mod transport;
mod vec3;

pub use diagnostics::{DiagnosticsOptions, DiagnosticsRecord, GridSpec};
pub use error::{Error, Result};
pub use gate::{
    GateParams, GateValue, MollifierParams, MollifierRule, SmoothCutoff, WeightedSample,
};
pub use kernel::{Frame, JumpCoefficient, KernelParams, COMPENSATION_SIGN};
pub use particles::{CompensationMode, Ensemble, InitialSpec, JumpEvent, RunReport, SimConfig};
pub use rng::{Purpose, StreamKey};
pub use vec3::Vec3;
