use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error("invalid mesh: {0}")]
    Mesh(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invalid field: {0}")]
    Field(String),
    #[error("fields live on different meshes")]
    MeshMismatch,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn mesh(msg: impl Into<String>) -> Self {
        Error::Mesh(msg.into())
    }
    pub fn params(msg: impl Into<String>) -> Self {
        Error::Params(msg.into())
    }
    pub fn field(msg: impl Into<String>) -> Self {
        Error::Field(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn solver(msg: impl Into<String>) -> Self {
        Error::Solver(msg.into())
    }
}
