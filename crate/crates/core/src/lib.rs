//! Real-space kinematics of a dislocated crystalline medium.
//!
//! The library models an elastic body whose lattice carries a continuous
//! distribution of dislocations. State lives on a periodic structured grid
//! and consists of the elastic deformation tensor together with the
//! dislocation (Burgers-vector) density. From these the crate builds the
//! metric-concordant connection with torsion, reconstructs the incompatible
//! lattice distortion by path integration, evolves the state in time under
//! prescribed velocity and plastic-flow drivers, and monitors the geometric
//! invariants that the continuous theory guarantees: the connection stays
//! flat, the dislocation density stays divergence-free, and the two
//! equivalent forms of the evolution equations stay numerically concordant.
//!
//! Everything is generic over the floating-point scalar through the
//! [`Real`] trait (implemented for `f32` and `f64`); the `*64`/`*32`
//! aliases at the crate root pick a concrete precision.
//!
//! Module map:
//! - [`grid`]: periodic lattice, coordinate charts, analytic field
//!   providers, fourth-order finite differences;
//! - [`tensor`]: tagged-index tensor fields, contraction, metric and
//!   volume tensor;
//! - [`geometry`]: connections, torsion, curvature, covariant derivatives,
//!   conservation residuals;
//! - [`reconstruct`]: lattice distortion from the state and back, path
//!   integration, gauge alignment;
//! - [`evolve`]: time stepping of the state and the invariant monitors.

pub mod error;
pub mod evolve;
pub mod geometry;
pub mod grid;
pub mod reconstruct;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use evolve::{
    monitor, rhs_deformation_hatted, rhs_density_hatted, rhs_plastic, rhs_reference,
    stage_geometry, step, step_with, theta, theta_from_distortion, Background, Diagnostics,
    Drivers, KinematicState, RhsForm, StageGeometry, SYMMETRY_TOLERANCE,
};
pub use geometry::{
    burgers_density_from_z, commutator_residual, concordant_connection, covariant_derivative,
    covariant_derivative_with, curvature, curvature_from_z, divergency_residual,
    divergency_residual_dual, levi_civita_connection, torsion_from_burgers_density, z_tensor,
    Connection,
};
pub use grid::{gradient_stack, partial_derivative, Chart, FieldProvider, Grid, MIN_NODES_PER_AXIS};
pub use reconstruct::{
    alignment_defect, apply_gauge, burgers_from_distortion, compatibility_residual,
    connection_from_distortion, connection_from_distortion_with, convert_index,
    deformation_from_distortion, gauge_align, integrate_pfaff, monodromy_defect,
    z_from_distortion, z_from_distortion_with, CompatibilityReport, Distortion, GaugeMatrix,
    PfaffOptions, TargetIndex, DEFAULT_COMPATIBILITY_THRESHOLD, GAUGE_ORTHOGONALITY_TOLERANCE,
};
pub use scalar::Real;
pub use tensor::{
    contract, invert3, sig, volume_tensor, IndexKind, Metric, Signature, TensorField,
    VolumeTensor,
};

/// Double-precision aliases (the default throughout the CLI).
pub type Grid64 = grid::Grid<f64>;
pub type TensorField64 = tensor::TensorField<f64>;
pub type Metric64 = tensor::Metric<f64>;
pub type Chart64 = grid::Chart<f64>;
pub type FieldProvider64 = grid::FieldProvider<f64>;
pub type Connection64 = geometry::Connection<f64>;
pub type Distortion64 = reconstruct::Distortion<f64>;
pub type Background64 = evolve::Background<f64>;
pub type KinematicState64 = evolve::KinematicState<f64>;
pub type Drivers64 = evolve::Drivers<f64>;
pub type Diagnostics64 = evolve::Diagnostics<f64>;

/// Single-precision aliases, for quick smoke runs where accuracy targets
/// are loose.
pub type Grid32 = grid::Grid<f32>;
pub type TensorField32 = tensor::TensorField<f32>;
pub type Metric32 = tensor::Metric<f32>;
pub type Chart32 = grid::Chart<f32>;
pub type FieldProvider32 = grid::FieldProvider<f32>;
pub type Connection32 = geometry::Connection<f32>;
pub type Distortion32 = reconstruct::Distortion<f32>;
pub type Background32 = evolve::Background<f32>;
pub type KinematicState32 = evolve::KinematicState<f32>;
pub type Drivers32 = evolve::Drivers<f32>;
pub type Diagnostics32 = evolve::Diagnostics<f32>;
