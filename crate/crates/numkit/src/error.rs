use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn dim_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(NumError::Dim {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
