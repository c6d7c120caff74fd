use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("negative edge weight {weight} between {u} and {v}")]
    NegativeWeight { u: usize, v: usize, weight: f64 },

    #[error("non-finite edge weight between {u} and {v}")]
    NonFiniteWeight { u: usize, v: usize },

    #[error("duplicate edge between {u} and {v}")]
    DuplicateEdge { u: usize, v: usize },

    #[error("vertex index {0} out of range")]
    VertexOutOfRange(usize),

    #[error("graph has no edges")]
    NoEdges,

    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("vertex {0} is unreachable from vertex {1}")]
    Unreachable(usize, usize),

    #[error("vertex {0} has zero measure")]
    IsolatedVertex(usize),

    #[error("lattice extent {extent} too small: {reason}")]
    ExtentTooSmall { extent: usize, reason: String },

    #[error("torus extent {extent} is not compatible with period {period}")]
    IncompatiblePeriod { extent: usize, period: usize },

    #[error("neighborhood map is not symmetric: {v} lists {w} but not conversely")]
    AsymmetricNeighborhood { v: usize, w: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid norm exponent p = {0} (need p >= 1)")]
    InvalidNorm(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("coupling function: {0}")]
    Coupling(String),

    #[error("newton iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular jacobian at iteration {iteration}; pin additional lags")]
    SingularJacobian { iteration: usize },

    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("{hypothesis} gate refused: {detail}")]
    GateRefused { hypothesis: String, detail: String },

    #[error("invariant violated at {witness}: {what}")]
    Invariant { what: String, witness: String },

    #[error("boundary guard: {0}")]
    BoundaryGuard(String),

    #[error("fit rejected: {0}")]
    Fit(String),

    #[error("dirichlet form is singular beyond constants (ball is disconnected)")]
    SingularDirichlet,

    #[error("vertex map is not total: vertex {0} has no image")]
    PartialMap(usize),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
