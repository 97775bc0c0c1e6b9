use std::fmt;

use egofront::Error;

/// A command failure classified by whose fault it is: exit status 1 for
/// bad input, 2 for everything else.
#[derive(Debug)]
pub enum Failure {
    User(String),
    Internal(String),
}

impl Failure {
    pub fn user(msg: impl Into<String>) -> Self {
        Self::User(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Self::Internal(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::User(_) => 1,
            Self::Internal(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::User(m) | Self::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidSchedule(_)
            | Error::TimestepOutOfRange { .. }
            | Error::ShapeMismatch(_)
            | Error::OutOfRange(_)
            | Error::InvalidInput(_)
            | Error::VariantUnavailable(_)
            | Error::InvalidSample { .. }
            | Error::InvalidBallot { .. }
            | Error::UnknownLabel(_)
            | Error::Manifest(_)
            | Error::Checkpoint(_)
            | Error::Config(_) => Self::User(msg),
            Error::Io(io) => io.into(),
            Error::Image(_) => Self::User(msg),
            Error::NonFiniteLoss { .. } | Error::Json(_) | Error::Tensor(_) => Self::Internal(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        use std::io::ErrorKind::*;
        match e.kind() {
            NotFound | PermissionDenied | AlreadyExists | InvalidInput | InvalidData => Self::User(e.to_string()),
            _ => Self::Internal(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::Internal(e.to_string())
    }
}

pub type Outcome<T = ()> = std::result::Result<T, Failure>;
