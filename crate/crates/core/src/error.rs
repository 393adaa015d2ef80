use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("singular volume field at ({x1}, {x2})")]
    SingularVolume { x1: f64, x2: f64 },

    #[error("sublevel set {{W <= {level}}} is not contained in the grid box (box admits levels below {cap})")]
    DomainTruncated { level: f64, cap: f64 },

    #[error("insufficient capacity: mass {requested} exceeds the {available} available")]
    InsufficientCapacity { requested: f64, available: f64 },

    #[error("potential value {value} lies outside the tabulated range [0, {u_max}]")]
    OutOfTable { value: f64, u_max: f64 },

    #[error("no level curve at p = {p}")]
    NoCurve { p: f64 },

    #[error("level curve at p = {p} has {vertices} vertices, at least {required} are needed")]
    Resolution {
        p: f64,
        vertices: usize,
        required: usize,
    },

    #[error("degenerate normal at ({x1}, {x2}): |grad pi| = {norm}")]
    DegenerateNormal { x1: f64, x2: f64, norm: f64 },

    #[error("particle left the medium at t = {t}: pi = {pi} exceeds N = {n_total}")]
    Escape { t: f64, pi: f64, n_total: f64 },

    #[error("source term is not average-free: residual {residual} exceeds {limit}")]
    InconsistentSource { residual: f64, limit: f64 },

    #[error("non-positive elliptic coefficient {value} on segment {segment}")]
    InvalidCoefficient { segment: usize, value: f64 },

    #[error("degenerate endpoint system: denominator {denominator}")]
    DegenerateEndpoint { denominator: f64 },

    #[error("point {x} outside the medium [{a}, {b}]")]
    OutOfDomain { x: f64, a: f64, b: f64 },

    #[error("{0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
