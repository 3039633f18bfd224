use std::fmt;

/// Errors raised by the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numerical error during {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("episode failed at step {step}: {detail}")]
    Episode {
        step: usize,
        detail: String,
        trace: Vec<crate::engine::StepRecord>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub(crate) fn input(msg: impl fmt::Display) -> Self {
        Error::Input(msg.to_string())
    }

    pub(crate) fn numerical(context: impl fmt::Display, detail: impl fmt::Display) -> Self {
        Error::Numerical {
            context: context.to_string(),
            detail: detail.to_string(),
        }
    }

    pub(crate) fn format(msg: impl fmt::Display) -> Self {
        Error::Format(msg.to_string())
    }

    /// True for errors caused by non-finite values rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::Episode { .. })
    }
}
