use stelab_core::Error as EngineError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot error: {0}")]
    Plot(String),
    #[error("tolerance exceeded: {0}")]
    Tolerance(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for a failed comparison, 3 for divergence, 4 for bad configuration
    /// or input files, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Tolerance(_) => 2,
            CliError::Config(_) => 4,
            CliError::Engine(e) => match e {
                EngineError::Divergence { .. } | EngineError::OdeDivergence { .. } => 3,
                EngineError::Io(_) => 1,
                _ => 4,
            },
            CliError::Io(_) | CliError::Csv(_) | CliError::Plot(_) => 1,
        }
    }

    pub fn is_divergence(&self) -> bool {
        self.exit_code() == 3
    }
}
