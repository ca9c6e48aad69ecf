use serde_json::json;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    /// A parity check failed; the message names the failing checks.
    Validation(String),
    Core(sattn_core::Error),
}

impl From<sattn_core::Error> for CliError {
    fn from(e: sattn_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Core(sattn_core::Error::Io { .. } | sattn_core::Error::Format(_)) => EXIT_IO,
            CliError::Core(_) => EXIT_USAGE,
        }
    }

    fn kind(&self) -> &str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Validation(_) => "validation",
            CliError::Core(e) => e.kind(),
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json(&self) -> String {
        let message = match self {
            CliError::Usage(m) | CliError::Validation(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        };
        json!({ "error": { "kind": self.kind(), "exit_code": self.exit_code(), "message": message } })
            .to_string()
    }
}
