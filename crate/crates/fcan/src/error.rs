use std::path::PathBuf;

pub type Result<T, E = AppError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] fcan_core::Error),
    #[error("stage {stage} failed")]
    Stage {
        stage: String,
        #[source]
        source: Box<AppError>,
    },
}

impl AppError {
    pub fn config(msg: impl Into<String>) -> Self {
        AppError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        AppError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        AppError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    pub fn is_numerical(&self) -> bool {
        match self {
            AppError::Core(fcan_core::Error::Numerical(_)) => true,
            AppError::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// 3 for numerical failures, 2 for bad configuration or input, 1 for IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            _ if self.is_numerical() => 3,
            AppError::Io { .. } => 1,
            AppError::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

/// Tags errors with the pipeline stage they came from.
pub trait StageExt<T> {
    fn stage(self, name: &str) -> Result<T>;
}

impl<T, E: Into<AppError>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, name: &str) -> Result<T> {
        self.map_err(|e| e.into().in_stage(name))
    }
}
