use thiserror::Error;

pub type Result<T> = std::result::Result<T, AbcError>;

#[derive(Debug, Error)]
pub enum AbcError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate distance distribution: all distances are equal")]
    DegenerateDistances,

    #[error("empty acceptance region: all kernel weights are zero")]
    EmptyAcceptance,

    #[error("singular design (use ridge): condition number {condition:.3e}")]
    SingularDesign { condition: f64 },

    #[error("simulator failed for {attempts} consecutive prior draws (model {model})")]
    SimulatorFailure { model: String, attempts: usize },

    #[error("log basis requires strictly positive statistics: statistic `{name}` = {value}")]
    NonPositiveLogInput { name: String, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for AbcError {
    fn from(e: csv::Error) -> Self {
        AbcError::Csv(e.to_string())
    }
}
