use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// malformed or invalid configuration, anchored at `path:line:column`
    #[error("{path}:{line}:{column}: {message}")]
    Config {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("experiment '{name}' failed: {source}")]
    Experiment {
        name: String,
        #[source]
        source: evolab::Error,
    },

    #[error("cannot emit {what}: {message}")]
    Emit { what: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for configuration problems, 1 for everything that went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
