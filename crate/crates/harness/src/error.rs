use thiserror::Error;

/// Harness failures, grouped by the process exit code they map to.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Numeric(String),
    #[error("i/o or format error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numeric(_) => 3,
            HarnessError::Io(_) => 4,
        }
    }
}

impl From<dpft_core::Error> for HarnessError {
    fn from(e: dpft_core::Error) -> Self {
        use dpft_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config { .. } | E::Selector(_) | E::UnknownParameter(_) | E::Method(_) | E::Input { .. } => {
                HarnessError::Config(msg)
            }
            E::Shape { .. } | E::Numeric { .. } | E::State(_) | E::Undefined(_) => HarnessError::Numeric(msg),
            _ => HarnessError::Io(msg),
        }
    }
}

impl From<dpft_accountant::AccountantError> for HarnessError {
    fn from(e: dpft_accountant::AccountantError) -> Self {
        use dpft_accountant::AccountantError as A;
        match e {
            A::Config(_) | A::Range(_) => HarnessError::Config(e.to_string()),
            A::Resource(_) | A::Accuracy(_) => HarnessError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

pub(crate) fn io_at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(format!("{}: {e}", path.display()))
}
