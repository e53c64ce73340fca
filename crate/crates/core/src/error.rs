use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("budget exceeded: {what} needs {needed}, limit {limit}")]
    Budget { what: &'static str, needed: u128, limit: u128 },
    #[error("freeness check failed after {0} re-draws")]
    Freeness(u32),
    #[error("window too small: {0}")]
    WindowTooSmall(String),
    #[error("coverage audit failed: {0}")]
    Coverage(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("arithmetic overflow in {0}")]
    Overflow(&'static str),
    #[error("gate violated at layer {layer}: {value} >= 1/2")]
    Gate { layer: usize, value: f64 },
    #[error("completion infeasible: {0}")]
    Infeasible(String),
    #[error("no Voronoi radius up to {0} satisfies the certificate")]
    NoVoronoiRadius(u32),
    #[error("counting mismatch: {0}")]
    Counting(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
