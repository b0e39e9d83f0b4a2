use std::fmt::Display;

use repsim::Error;

/// Exit 1 for bad input, 2 for failures while running.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => e,
        }
    }

    pub fn invalid(msg: impl Display) -> Failure {
        Failure::Validation(anyhow::anyhow!("{msg}"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let validation = matches!(
            e,
            Error::Config(_)
                | Error::ChunkTooSmall(_)
                | Error::InvalidTap { .. }
                | Error::WidthMismatch { .. }
                | Error::TokenOutOfRange { .. }
        );
        let e = anyhow::Error::new(e);
        if validation {
            Failure::Validation(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

/// Attaches context to library results while keeping their exit class.
pub trait Context<T> {
    fn context(self, what: impl Display) -> Result<T, Failure>;
}

impl<T> Context<T> for repsim::Result<T> {
    fn context(self, what: impl Display) -> Result<T, Failure> {
        self.map_err(|e| match Failure::from(e) {
            Failure::Validation(e) => Failure::Validation(e.context(what.to_string())),
            Failure::Runtime(e) => Failure::Runtime(e.context(what.to_string())),
        })
    }
}

/// Output write failures are runtime errors.
pub fn io<T>(r: std::io::Result<T>, what: impl Display) -> Result<T, Failure> {
    r.map_err(|e| Failure::Runtime(anyhow::Error::new(e).context(what.to_string())))
}
