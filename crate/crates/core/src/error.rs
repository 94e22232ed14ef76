use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unsupported catalog entry: {0}")]
    UnsupportedCatalogEntry(String),
    #[error("degenerate family: {0}")]
    DegenerateFamily(String),
    #[error("family validation failed: {0}")]
    Validation(String),
    #[error("ill-posed network: {0}")]
    IllPosedNetwork(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("level cap of {cap} exceeded")]
    CapExceeded { cap: usize },
    #[error("invalid address: {0}")]
    InvalidAddress(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("inconclusive root: {0}")]
    InconclusiveRoot(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("numerical degeneracy at lambda = {lambda}: {detail}")]
    NumericalDegeneracy { lambda: f64, detail: String },
    #[error("size cap exceeded: {0}")]
    SizeCap(String),
    #[error("audit failure: {0}")]
    AuditFailure(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
