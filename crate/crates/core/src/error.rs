use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A kernel received operands whose dimensions do not conform.
    #[error("{kernel}: dimension mismatch: {detail}")]
    Shape { kernel: &'static str, detail: String },

    /// Misuse of the autodiff tape (non-scalar loss, reused tape, ...).
    #[error("tape: {0}")]
    Tape(String),

    #[error("config: {0}")]
    Config(String),

    #[error("mask plan: {0}")]
    MaskPlan(String),

    /// Caller-side contract violation between two otherwise valid values.
    #[error("contract: {0}")]
    Contract(String),

    #[error("feature unavailable: {0}")]
    FeatureUnavailable(String),

    #[error("format: {0}")]
    Format(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGrad { param: String },

    #[error("training halted at step {step}: non-finite loss (lr {lr:e}, grad norm {grad_norm:e})")]
    NonFiniteLoss { step: u64, lr: f64, grad_norm: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(kernel: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { kernel, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::MaskPlan(_))
    }
}
