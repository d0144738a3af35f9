use std::fmt;

use icarec_core::Error;

/// Failure classes with their documented process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Other = 1,
    Usage = 2,
    MissingFile = 3,
    Schema = 4,
    NonFinite = 5,
}

impl Kind {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Other => "other",
            Kind::Usage => "usage",
            Kind::MissingFile => "missing_file",
            Kind::Schema => "schema",
            Kind::NonFinite => "non_finite",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(Kind::Schema, message)
    }

    /// One-line machine-parseable form printed on stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind.name(),
            "exit_code": self.kind.code(),
            "message": self.message,
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

fn is_not_found(e: &Error) -> bool {
    match e {
        Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
        Error::Csv(c) => matches!(c.kind(), csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound),
        _ => false,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = if is_not_found(&e) {
            Kind::MissingFile
        } else {
            match e {
                Error::Json { .. } | Error::Spec { .. } | Error::Csv(_) | Error::Checkpoint(_) => Kind::Schema,
                Error::Diverged { .. } | Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::FilterDiverged(_) => {
                    Kind::NonFinite
                }
                _ => Kind::Other,
            }
        };
        Self::new(kind, e.to_string())
    }
}

/// Treats any core error raised while loading inputs as a schema violation,
/// except for missing files.
pub fn loading(e: Error) -> CliError {
    let mut c = CliError::from(e);
    if c.kind == Kind::Other {
        c.kind = Kind::Schema;
    }
    c
}

pub type CliResult<T> = Result<T, CliError>;
