use std::path::PathBuf;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("unknown key: {0}")]
    Key(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("empty statistics: {0}")]
    Empty(String),

    #[error("config error: {0}")]
    Config(String),

    /// The objective produced a non-finite value. `last_x` is the last
    /// iterate at which the objective was finite.
    #[error("non-finite objective at iteration {iter}")]
    NonFinite { iter: usize, last_x: Vec<f64> },

    #[error("cannot open {what} {path}: {source}")]
    Open {
        what: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
