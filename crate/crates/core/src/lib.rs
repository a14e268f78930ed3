//! Desk-scale laboratory for the simultaneous recovery of a piecewise-constant
//! anisotropic conductivity tensor and scalar potential from a local
//! Neumann-to-Dirichlet map.
//!
//! The pipeline mirrors the constructive steps of the underlying uniqueness
//! argument:
//!
//! 1. [`geometry`] builds layered box domains with curved graph interfaces and
//!    extracts non-flatness witnesses and tangent frames on the accessible
//!    boundary patch.
//! 2. [`fem`] solves the anisotropic Schrödinger-type Neumann problem with a
//!    P1 Galerkin discretization on conforming tetrahedral meshes.
//! 3. [`ndmap`] synthesizes the discrete local Neumann-to-Dirichlet matrix,
//!    the Alessandrini identity, and the quadruple-difference kernel.
//! 4. [`probe`] fits the near-pole singularity of the Neumann kernel to read
//!    off tangential metric data, and [`metric`] assembles the full boundary
//!    tensor from three tangent planes.
//! 5. [`reconstruct`] drives layer stripping: boundary recovery for the first
//!    layer, Gauss-Newton misfit fits for the deeper ones, and verification
//!    harnesses for map-propagation and partition-merge consistency.

pub mod config;
pub mod error;
pub mod fem;
pub mod geometry;
pub mod mesh;
pub mod metric;
pub mod ndmap;
pub mod parallel;
pub mod probe;
pub mod reconstruct;
pub mod tensor;
pub mod vtk;

pub use error::Error;
pub use tensor::SymTensor;

/// Threshold below which a gamma parameter counts as zero in the
/// non-flatness admissibility tests.
pub const EPS_FLAT: f64 = 1e-3;
/// Minimum |det| accepted for the 2x2 tangent-plane assembly blocks.
pub const EPS_DET: f64 = 1e-6;
/// Relative tolerance for cross-checking the redundant assembly row.
pub const TAU_CONSIST: f64 = 1e-4;
/// Relative fit-residual bound for kernel singularity fits.
pub const TAU_FIT: f64 = 0.05;
