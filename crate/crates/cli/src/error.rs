use std::fmt;

use pipefreeze_core::Error;

#[derive(Debug)]
pub enum CliError {
    /// Bad config, arguments or input files.
    Config(String),
    /// The LP failed or produced an inconsistent plan.
    Lp(String),
    Io(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Lp(_) => 3,
            CliError::Io(_) | CliError::Runtime(_) => 1,
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Lp(_) => "lp",
            CliError::Io(_) => "io",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn lp(e: Error) -> Self {
        CliError::Lp(e.to_string())
    }

    pub fn runtime(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnsupportedSchedule { .. } | Error::Domain { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (CliError::Config(m) | CliError::Lp(m) | CliError::Io(m) | CliError::Runtime(m)) = self;
        // Keep diagnostics on one line.
        write!(f, "error[{}]: {}", self.tag(), m.replace('\n', " "))
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
