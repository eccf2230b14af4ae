use crate::augment::AugmentError;
use crate::tensor::snapshot::SnapshotError;
use crate::tensor::TensorError;
use crate::trainer::NonFiniteLoss;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("byol task needs two augmented views, got {0}")]
    TooFewViews(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    NonFinite(#[from] Box<NonFiniteLoss>),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
