use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("range error: {what} = {value} outside [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("ill-posed terminal problem: {0}")]
    IllPosedTerminal(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("singular tridiagonal system at row {row} (pivot {pivot:e})")]
    SingularSystem { row: usize, pivot: f64 },

    #[error("Newton iteration failed at time row {row}: {detail}")]
    Newton { row: usize, detail: String },

    #[error("projected relaxation stagnated at time row {row}; residual history {history:?}")]
    Stagnation { row: usize, history: Vec<f64> },

    #[error("truncation window error: {0}")]
    Window(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
