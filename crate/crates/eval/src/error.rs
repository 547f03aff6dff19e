use digitwin_models::ModelError;
use digitwin_sim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("train/test leakage: {0}")]
    Leakage(String),
    #[error("unsupported model: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl From<digitwin_autodiff::AutodiffError> for EvalError {
    fn from(e: digitwin_autodiff::AutodiffError) -> Self {
        EvalError::Model(e.into())
    }
}
