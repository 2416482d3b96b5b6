use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("degenerate vector: norm {norm:e} is below {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    Rank { shape: Vec<usize> },
    #[error("backward already ran on this graph")]
    GraphConsumed,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("knowledge context is empty")]
    EmptyContext,
    #[error("pseudo slot {slot} out of range for {rows} pseudo rows")]
    Injection { slot: usize, rows: usize },
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    Length { len: usize, max: usize },
    #[error("mining: {0}")]
    Mining(String),
    #[error("contrastive batch has {0} rows, at least 2 are required")]
    Batch(usize),
    #[error("schedule step {step} is past the final step {total}")]
    Schedule { step: u64, total: u64 },
    #[error("unknown {what} id {id}")]
    Lookup { what: &'static str, id: usize },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
