use std::fmt;

use serde::Serialize;
use ssip_core::SsipError;

#[derive(Debug)]
pub enum CliError {
    Core(SsipError),
    Usage(String),
    Plot(String),
}

impl From<SsipError> for CliError {
    fn from(e: SsipError) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Plot(msg) => write!(f, "plot error: {msg}"),
        }
    }
}

#[derive(Serialize)]
struct Body<'a> {
    kind: &'a str,
    message: String,
}

#[derive(Serialize)]
struct Record<'a> {
    error: Body<'a>,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "UsageError",
            CliError::Plot(_) => "PlotError",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// One JSON line: `{"error": {"kind": ..., "message": ...}}`.
    pub fn record(&self) -> String {
        serde_json::to_string(&Record {
            error: Body {
                kind: self.kind(),
                message: self.to_string(),
            },
        })
        .expect("error record serializes")
    }
}
