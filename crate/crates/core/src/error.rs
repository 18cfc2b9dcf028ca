use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scenario parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// MGF evaluated at or beyond its pole `t >= alpha`.
    #[error("moment generating function pole: t = {t} >= alpha = {alpha}")]
    Pole { t: f64, alpha: f64 },

    /// The sojourn-time transform does not exist at this `t` for the node's load.
    #[error("infeasible t at node {node}: stability margin {margin} is not negative")]
    InfeasibleT { node: usize, margin: f64 },

    #[error("no feasible t at node {node}: traffic intensity {rho} >= 1 or margin cannot reach -epsilon")]
    NoFeasibleT { node: usize, rho: f64 },

    #[error("node {node} is unstable (rho = {rho})")]
    UnstableNode { node: usize, rho: f64 },

    #[error(
        "no feasible scheduling: chunk demand {demand} exceeds total node capacity {capacity}"
    )]
    InfeasibleRegion { demand: f64, capacity: f64 },

    #[error(
        "feasibility projection did not converge after {iterations} sweeps (residual {residual:e})"
    )]
    ProjectionDiverged { iterations: usize, residual: f64 },

    #[error("row {row} of the access matrix sums to {sum}, expected {expected}")]
    RowSum { row: usize, sum: f64, expected: f64 },

    #[error("insufficient samples for file {file}: {have} < {need}")]
    InsufficientSamples {
        file: usize,
        have: usize,
        need: usize,
    },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("{context}")]
    AtPoint {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attaches a node index to node-level errors.
    pub fn at_node(self, j: usize) -> Self {
        match self {
            Error::InfeasibleT { margin, .. } => Error::InfeasibleT { node: j, margin },
            Error::NoFeasibleT { rho, .. } => Error::NoFeasibleT { node: j, rho },
            Error::UnstableNode { rho, .. } => Error::UnstableNode { node: j, rho },
            other => other,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
