use std::path::{Path, PathBuf};

use thiserror::Error;

use varnorm::{Error as CoreError, TensorError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: CoreError },
}

impl CliError {
    pub fn file(path: &Path) -> impl FnOnce(CoreError) -> CliError + '_ {
        move |source| CliError::File {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        let core = match self {
            CliError::Usage(_) => return 1,
            CliError::Core(e) | CliError::File { source: e, .. } => e,
        };
        match core {
            CoreError::Config(_) => 1,
            CoreError::Diverged { .. }
            | CoreError::Tensor(TensorError::NonFinite { .. })
            | CoreError::Tensor(TensorError::Domain { .. }) => 3,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}
