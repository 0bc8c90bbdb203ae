use std::fmt;

use panelqmle_core::PanelError;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid configuration or input data.
    Config(String),
    Io(String),
    /// The estimator or Monte Carlo run did not converge.
    NotConverged(String),
    Panel(PanelError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Panel(PanelError::InvalidInput(_)) => 2,
            CliError::NotConverged(_) | CliError::Panel(PanelError::Divergence(_) | PanelError::NonMonotone(_)) => 3,
            CliError::Panel(PanelError::Degenerate(_)) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::NotConverged(m) => write!(f, "not converged: {m}"),
            CliError::Panel(e) => write!(f, "{e}"),
        }
    }
}

impl From<PanelError> for CliError {
    fn from(e: PanelError) -> Self {
        CliError::Panel(e)
    }
}
