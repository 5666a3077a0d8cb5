use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("no loss positions: every target is ignored")]
    NoLossPositions,
    #[error("CTC infeasible: {frames} frames cannot emit {labels} labels with {repeats} repeats")]
    CtcInfeasible {
        frames: usize,
        labels: usize,
        repeats: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite score: {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
