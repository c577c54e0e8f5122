use crate::solver::SolveReport;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("empty cluster: {0}")]
    EmptyCluster(String),

    #[error("unresolvable region: {} bad top-scale cube(s), first at {:?}", .0.len(), .0.first())]
    Unresolvable(Vec<crate::geometry::TriadicCube>),

    #[error("partition construction failed: {0}")]
    Construction(String),

    #[error("solver did not converge: {message} ({report:?})")]
    Solver { message: String, report: SolveReport },

    #[error("data error: {0}")]
    Data(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("invalid format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
