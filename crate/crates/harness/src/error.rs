use deepgp::error::DgpError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// `row` counts data rows from 1 (the header is row 0); `col` from 1.
    #[error("parse error at row {row}, column {col}: {message}")]
    Parse { row: usize, col: usize, message: String },
    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("load error in field `{field}`: {message}")]
    Load { field: String, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Core(#[from] DgpError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Parse { .. } => "parse",
            HarnessError::Config { .. } => "config",
            HarnessError::Load { .. } => "load",
            HarnessError::InvalidArgument(_) => "invalid-argument",
            HarnessError::Core(DgpError::NumericalFailure { .. }) => "numerical",
            HarnessError::Core(_) => "model",
            HarnessError::Io(_) => "io",
        }
    }

    /// Single tab-separated line for scripts: `error<TAB>kind=...<TAB>...`.
    pub fn machine_line(&self) -> String {
        let mut fields = vec!["error".to_string(), format!("kind={}", self.kind())];
        match self {
            HarnessError::Parse { row, col, .. } => {
                fields.push(format!("row={row}"));
                fields.push(format!("col={col}"));
            }
            HarnessError::Config { key, .. } => fields.push(format!("key={key}")),
            HarnessError::Load { field, .. } => fields.push(format!("field={field}")),
            _ => {}
        }
        let message = self.to_string().replace(['\t', '\n'], " ");
        fields.push(format!("message={message}"));
        fields.join("\t")
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        HarnessError::InvalidArgument(message.into())
    }

    pub(crate) fn config(key: &str, message: impl Into<String>) -> Self {
        HarnessError::Config { key: key.to_string(), message: message.into() }
    }

    pub(crate) fn load(field: &str, message: impl Into<String>) -> Self {
        HarnessError::Load { field: field.to_string(), message: message.into() }
    }
}
