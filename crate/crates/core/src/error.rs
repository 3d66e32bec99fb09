use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-differentiable node `{0}` reached during backward pass")]
    NonDifferentiable(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("step range error: {0}")]
    StepRange(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("numerical failure at diffusion step {step}: {reason}")]
    Numerical { step: usize, reason: String },

    #[error("setup error: {0}")]
    Setup(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("image too small for {requested} levels (at most {max_feasible} feasible)")]
    Levels { requested: usize, max_feasible: usize },

    #[error("degenerate camera pose: {0}")]
    Pose(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
