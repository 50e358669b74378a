use thiserror::Error;

use crate::Point;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("density unavailable: {0}")]
    DensityUnavailable(String),

    #[error("singular or ill-conditioned system: {0}")]
    Singular(String),

    #[error("blow-up at t = {time}: last finite state ({}, {})", position.x, position.y)]
    BlowUp { time: f64, position: Point },

    #[error("censored: no hit after elapsed time {elapsed}")]
    Censored { elapsed: f64 },

    #[error("step too large: proposal still outside the cell after repeated reflection (f = {f_value})")]
    StepTooLarge { f_value: f64 },

    #[error("irregular level {level}: |grad q| = {grad_norm:e} at ({}, {})", at.x, at.y)]
    IrregularLevel { level: f64, grad_norm: f64, at: Point },

    #[error("disconnected milestone at level {level}: {components} components")]
    DisconnectedMilestone { level: f64, components: usize },

    #[error("point ({}, {}) lies outside the grid", .0.x, .0.y)]
    OutsideGrid(Point),

    #[error("reducible chain: indices {0:?} are not reachable")]
    Reducible(Vec<usize>),

    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
