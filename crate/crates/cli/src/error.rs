use std::path::Path;

use serde::Serialize;
use thiserror::Error;
use zap_core::ZapError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Input { line: Option<u64>, message: String },
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn input(line: Option<u64>, message: impl Into<String>) -> Self {
        CliError::Input { line, message: message.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numeric(_) => 3,
            _ => 2,
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a str,
            exit_code: u8,
            #[serde(skip_serializing_if = "Option::is_none")]
            line: Option<u64>,
            message: String,
        }
        let (kind, line) = match self {
            CliError::Input { line, .. } => ("input", *line),
            CliError::Numeric(_) => ("numeric", None),
            CliError::Io { .. } => ("io", None),
        };
        let rec = Record { error: kind, exit_code: self.exit_code(), line, message: self.to_string() };
        serde_json::to_string(&rec).expect("plain record")
    }
}

impl From<ZapError> for CliError {
    fn from(e: ZapError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::input(None, e.to_string())
        }
    }
}
