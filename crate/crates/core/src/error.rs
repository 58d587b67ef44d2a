use thiserror::Error;

use crate::math::MathError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("point ({x:.3}, {y:.3}) is not in free space")]
    NotFree { x: f64, y: f64 },
    #[error("goal is unreachable")]
    Unreachable,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{what}: parse error at line {line}: {msg}")]
    Parse { what: &'static str, line: usize, msg: String },
    #[error("episode sampling gave up after {attempts} attempts ({kept} of {wanted} kept)")]
    SamplingExhausted { attempts: usize, kept: usize, wanted: usize },
    #[error("episode already finished")]
    EpisodeDone,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}
