use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(String),
    #[error("{0}")]
    Run(String),
    #[error(transparent)]
    Sim(#[from] digitwin_sim::SimError),
    #[error(transparent)]
    Model(#[from] digitwin_models::ModelError),
    #[error(transparent)]
    Eval(#[from] digitwin_eval::EvalError),
    #[error(transparent)]
    Autodiff(#[from] digitwin_autodiff::AutodiffError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}
