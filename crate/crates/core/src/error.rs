use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Messages name the module the error originates from so that the CLI can
/// surface them without additional context.
#[derive(Debug, Error)]
pub enum DynslError {
    #[error("data: missing column `{column}` in {file}")]
    Schema { file: String, column: String },

    #[error("data: parse error in {file} at row {row}: {message}")]
    Parse { file: String, row: usize, message: String },

    #[error("data: {file} row {row}: {message}")]
    Referential { file: String, row: usize, message: String },

    #[error("{module}: invalid configuration: {message}")]
    Config { module: &'static str, message: String },

    #[error("{module}: {message}")]
    Domain { module: &'static str, message: String },

    #[error("{module}: not estimable: {message}")]
    Estimability { module: &'static str, message: String },

    #[error("{module}: fit failed: {message}")]
    Fit { module: &'static str, message: String },

    #[error("{module}: numerical failure: {message}")]
    Numerical { module: &'static str, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T, E = DynslError> = std::result::Result<T, E>;

impl DynslError {
    pub(crate) fn domain(module: &'static str, message: impl Into<String>) -> Self {
        DynslError::Domain {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn config(module: &'static str, message: impl Into<String>) -> Self {
        DynslError::Config {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn estimability(module: &'static str, message: impl Into<String>) -> Self {
        DynslError::Estimability {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn fit(module: &'static str, message: impl Into<String>) -> Self {
        DynslError::Fit {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn numerical(module: &'static str, message: impl Into<String>) -> Self {
        DynslError::Numerical {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DynslError::Io {
            path: path.into(),
            source,
        }
    }

    /// A short remediation hint for command-line users.
    pub fn hint(&self) -> &'static str {
        match self {
            DynslError::Schema { .. } => "check the column names in the [data.schema] section",
            DynslError::Parse { .. } => "numeric fields must use a decimal point and no separators",
            DynslError::Referential { .. } => {
                "every measurement must belong to a known subject and precede its observed time"
            }
            DynslError::Config { .. } => "fix the named configuration field",
            DynslError::Domain { .. } => "check that the prediction window matches the data",
            DynslError::Estimability { .. } => "choose a window or fold count with more events and less censoring",
            DynslError::Fit { .. } => "simplify the learner or drop it from the library",
            DynslError::Numerical { .. } => "rescale inputs or adjust tolerances",
            DynslError::Io { .. } => "check the path and permissions",
            DynslError::Serialization(_) => "the file may be corrupt or from another version",
        }
    }
}
