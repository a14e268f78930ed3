//! Error types, one enum per subsystem plus a catch-all wrapper.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("interfaces cross near x' = {at:?}: {lower} !< {upper}")]
    OrderingViolation { lower: f64, upper: f64, at: Vec<f64> },
    #[error("layer {index} is empty")]
    EmptyLayer { index: usize },
    #[error("accessible patch extends to {extent:.4}, outside the usable radius {radius:.4}")]
    SigmaOutsideGraph { extent: f64, radius: f64 },
    #[error("point at |x'| = {r:.4} is outside the graph domain of radius {radius}")]
    OutsideGraphDomain { r: f64, radius: f64 },
    #[error("interface is flat: no witness triple reaches the normal deficit threshold")]
    FlatInterface,
    #[error("witness normals give inadmissible gammas ({gamma1:.3e}, {gamma2:.3e}, {gamma3:.3e})")]
    InadmissibleGammas { gamma1: f64, gamma2: f64, gamma3: f64 },
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("dimension {n} too small, need n >= 3")]
    DimensionTooSmall { n: usize },
    #[error("plane basis is not orthonormal (deviation {deviation:.3e})")]
    NonOrthonormalBasis { deviation: f64 },
    #[error("direction does not lie in the tangent plane (residual {residual:.3e})")]
    DirectionOutsidePlane { residual: f64 },
    #[error("gammas ({gamma1:.3e}, {gamma2:.3e}, {gamma3:.3e}) violate the admissibility condition")]
    InadmissibleGammas { gamma1: f64, gamma2: f64, gamma3: f64 },
    #[error("selected assembly block is near singular (|det| = {det:.3e})")]
    IllConditionedAssembly { det: f64 },
    #[error("redundant assembly rows disagree (relative residual {residual:.3e})")]
    InconsistentForms { residual: f64 },
}

#[derive(Debug, Error)]
pub enum FemError {
    #[error("layer {layer} has thickness {thickness:.4}, thinner than two sheets at h = {h}")]
    LayerTooThin { layer: usize, thickness: f64, h: f64 },
    #[error("degenerate element {element} (volume {volume:.3e})")]
    DegenerateElement { element: usize, volume: f64 },
    #[error("mesh has {labels} labels but the coefficient field has {layers} layers")]
    LabelMismatch { labels: usize, layers: usize },
    #[error("all potentials vanish: the Neumann problem is not coercive")]
    NotCoercive,
    #[error("coefficient tensor in layer {layer} violates the ellipticity bounds [1/lambda, lambda]")]
    NotElliptic { layer: usize },
    #[error("sparse Cholesky factorization failed: system is not positive definite")]
    FactorizationFailure,
    #[error("flux has support outside the accessible patch")]
    FluxOffBoundary,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum NdError {
    #[error("accessible patch contains no mesh nodes")]
    EmptySigma,
    #[error("operands were built on different meshes")]
    MeshMismatch,
    #[error("kernel arguments must be four distinct nodes")]
    CoincidingPoints,
    #[error("node {node} is not in the flux basis")]
    NodeOutsideBasis { node: usize },
    #[error("N-D matrix file is malformed: {0}")]
    MalformedFile(String),
    #[error(transparent)]
    Fem(#[from] FemError),
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("dimension {n} too small, need n >= 3")]
    DimensionTooSmall { n: usize },
    #[error("probe point at radius {radius:.4} leaves the accessible patch")]
    ProbeLeavesSigma { radius: f64 },
    #[error("reference points too close to the pole: separation {separation:.4} < {required:.4}")]
    PointsTooClose { separation: f64, required: f64 },
    #[error("probe schedule too narrow: {count} radii spanning a factor {span:.3}, need 4 spanning 4")]
    ScheduleTooNarrow { count: usize, span: f64 },
    #[error("singularity fit rejected: relative residual {residual:.3e}, exponent {exponent:.3}")]
    BadFit { residual: f64, exponent: f64 },
    #[error("recovered tensor violates the configured ellipticity bound {lambda}")]
    AnisotropyOutOfRange { lambda: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Nd(#[from] NdError),
}

#[derive(Debug, Error)]
pub enum RecoverError {
    #[error("misfit failed to decrease for {stalls} consecutive iterations (stage {stage})")]
    FitDiverged { stage: usize, stalls: usize },
    #[error("feasibility projection cycled at stage {stage}")]
    InfeasibleIterate { stage: usize },
    #[error("coefficient fields differ in the frozen prefix (layer {layer})")]
    CoefficientPrefixMismatch { layer: usize },
    #[error("data mesh is not a refinement of the inversion mesh")]
    NotARefinement,
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
}

/// Catch-all error for the orchestration layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Recover(#[from] RecoverError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
