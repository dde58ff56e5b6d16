use std::fmt;

use duplex_latent::Error;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Fail {
    Usage(String),
    Data(String),
    Checkpoint(String),
    Runtime(String),
}

impl Fail {
    pub fn code(&self) -> i32 {
        match self {
            Fail::Usage(_) => 2,
            Fail::Data(_) => 3,
            Fail::Checkpoint(_) => 4,
            Fail::Runtime(_) => 5,
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            Fail::Usage(m) => ("usage error", m),
            Fail::Data(m) => ("data error", m),
            Fail::Checkpoint(m) => ("checkpoint error", m),
            Fail::Runtime(m) => ("runtime failure", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Fail {
        let m = e.to_string();
        match e {
            Error::Invalid(_) => Fail::Usage(m),
            Error::UnknownToken(_) | Error::Layout(_) | Error::Parse { .. } | Error::Io { .. } | Error::Json(_) => {
                Fail::Data(m)
            }
            Error::Checkpoint { .. } => Fail::Checkpoint(m),
            Error::Shape(_) | Error::NonFinite(_) | Error::FrameBudget(_) | Error::Diverged(_) => Fail::Runtime(m),
        }
    }
}
