use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite input in {0}")]
    NonFinite(&'static str),

    #[error("metric violation: {reason} (witness {i}, {j}, {k})")]
    MetricViolation {
        i: usize,
        j: usize,
        k: usize,
        reason: &'static str,
    },

    #[error("vertex measure must be positive, mu[{index}] = {value}")]
    NonpositiveMeasure { index: usize, value: f64 },

    #[error("invalid conductance at ({i}, {j}): {reason}")]
    InvalidConductance {
        i: usize,
        j: usize,
        reason: &'static str,
    },

    #[error("conductance graph is disconnected ({components} components)")]
    DisconnectedGraph { components: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("eigensolver did not reach tolerance {tolerance:e} (worst defect {defect:e})")]
    EigensolverNoConvergence { tolerance: f64, defect: f64 },

    #[error("time must be positive, got {0}")]
    NonpositiveTime(f64),

    #[error("theta must lie in (0, 1), got {0}")]
    ThetaOutOfRange(f64),

    #[error("quadrature did not converge: error estimate {estimate:e} > tolerance {tolerance:e}")]
    QuadratureNoConvergence { estimate: f64, tolerance: f64 },

    #[error("family member {index} is constant")]
    ConstantFunctionInFamily { index: usize },

    #[error("grid exponent a = {grid_a} does not match 1 - 2*theta = {expected}")]
    GridThetaMismatch { grid_a: f64, expected: f64 },

    #[error("first grid cell is degenerate")]
    DegenerateFirstCell,

    #[error("energy tail beyond Ymax is {bound:e}, above tolerance {tolerance:e}")]
    TailNotConverged { bound: f64, tolerance: f64 },

    #[error("subset is empty")]
    EmptySubset,

    #[error("radius {radius} exceeds grid height {ymax}")]
    RadiusExceedsGrid { radius: f64, ymax: f64 },

    #[error("invalid Dirichlet problem: {0}")]
    InvalidProblem(String),

    #[error("linear system is singular")]
    SingularSystem,

    #[error("iteration budget of {iterations} exhausted (relative residual {residual:e})")]
    IterationBudgetExceeded { iterations: usize, residual: f64 },

    #[error("ball (center {center}, radius {radius}) is not compactly inside the domain")]
    BallNotCompactlyInside { center: usize, radius: f64 },

    #[error("solution is negative at point {index} ({value})")]
    NegativeSolution { index: usize, value: f64 },

    #[error("need at least 3 radii for a fit, found {found}")]
    InsufficientScales { found: usize },
}
