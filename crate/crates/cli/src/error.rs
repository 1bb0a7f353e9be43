use std::fmt;

use ens_transformer::Error;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Usage(_) | Error::Checkpoint(_) => EXIT_CONFIG,
            Error::Numeric(_) | Error::Training(_) | Error::Domain(_) => EXIT_NUMERIC,
            Error::Dimension { .. } | Error::EnsembleSize { .. } | Error::Format { .. } | Error::Data(_) | Error::Io { .. } => {
                EXIT_DATA
            }
        };
        Self { code, msg: e.to_string() }
    }
}
