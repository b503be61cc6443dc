use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An iterative method hit its iteration cap. `history` holds the worst
    /// relative residual after every iteration.
    #[error("convergence failure: {message}")]
    Convergence { message: String, history: Vec<f64> },

    #[error("breakdown at iteration {iteration}: {message}")]
    Breakdown { iteration: usize, message: String },

    #[error("factorization failure: {0}")]
    Factorization(String),

    #[error("state error: {0}")]
    State(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<S: Into<String>>(msg: S) -> Error {
    Error::InvalidArgument(msg.into())
}

impl Error {
    /// Prefix the message with `ctx`, keeping the variant.
    pub fn context(self, ctx: &str) -> Error {
        match self {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{ctx}: {m}")),
            Error::Convergence { message, history } => Error::Convergence { message: format!("{ctx}: {message}"), history },
            Error::Breakdown { iteration, message } => Error::Breakdown { iteration, message: format!("{ctx}: {message}") },
            Error::Factorization(m) => Error::Factorization(format!("{ctx}: {m}")),
            Error::State(m) => Error::State(format!("{ctx}: {m}")),
            Error::Parse { offset, message } => Error::Parse { offset, message: format!("{ctx}: {message}") },
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{ctx}: {e}"))),
        }
    }
}
