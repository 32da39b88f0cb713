//! Error type shared by all modules.
//!
//! Quantities attached to errors are reported as `f64` regardless of the
//! working scalar so that the type stays object-safe and printable.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Everything that can go wrong while building grids, charts, and fields or
/// while running the geometric pipelines.
#[derive(Debug, Error)]
pub enum Error {
    /// Grid construction rejected the requested dimensions or lengths.
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// A caller-supplied argument is out of contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two tensor signatures (or a signature and an operation) do not match.
    #[error("signature mismatch: {0}")]
    Signature(String),

    /// A provider returned NaN or an infinity while being sampled.
    #[error("sampling produced a non-finite value at node {node:?}")]
    NonFiniteSample { node: [usize; 3] },

    /// The chart jacobian is singular somewhere on the grid.
    #[error("degenerate chart at node {node:?}: jacobian determinant {det:e}")]
    DegenerateChart { node: [usize; 3], det: f64 },

    /// A pointwise 3x3 inversion hit a numerically singular matrix.
    #[error("singular matrix at node {node:?}: |det| {det:e} below 1e-12 of scale {scale:e}")]
    SingularMatrix { node: [usize; 3], det: f64, scale: f64 },

    /// A metric (chart metric or elastic deformation) is not symmetric
    /// positive definite where it must be.
    #[error("metric not positive definite at node {node:?}")]
    IndefiniteMetric { node: [usize; 3] },

    /// A torsion candidate is not antisymmetric in its two lower slots.
    #[error("torsion not antisymmetric in its lower slots: residual {residual:e}")]
    AsymmetricTorsion { residual: f64 },

    /// Pfaff integration refused to run because the connection is too far
    /// from flat for a single-valued solution to exist.
    #[error(
        "connection incompatible with Pfaff integration: curvature sup-norm {residual:e} \
         exceeds threshold {threshold:e}"
    )]
    IncompatibleConnection { residual: f64, threshold: f64 },

    /// The initial matrix handed to the Pfaff integrator is singular.
    #[error("degenerate Pfaff initial value: determinant {det:e}")]
    DegenerateInitialValue { det: f64 },

    /// Two distortion fields are not related by a constant gauge rotation.
    #[error("gauge alignment failed: residual {residual:e} exceeds tolerance {tolerance:e}")]
    GaugeMismatch { residual: f64, tolerance: f64 },

    /// Time integration drove the deformation tensor out of the positive
    /// definite cone.
    #[error("deformation lost positive definiteness at node {node:?}, time {time}")]
    LostPositivity { node: [usize; 3], time: f64 },

    /// Time integration produced NaN or infinite state values.
    #[error("state became non-finite at node {node:?}, time {time}")]
    NonFiniteState { node: [usize; 3], time: f64 },
}
