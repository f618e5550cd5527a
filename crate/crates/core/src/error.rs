use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("column `{0}` has no observed value, its domain cannot be learned")]
    EmptyColumn(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unknown synthetic domain `{0}`")]
    UnknownDomain(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("value {value} of feature `{feature}` lies outside its domain")]
    OutOfDomain { feature: String, value: String },

    #[error("partition has more than {0} elements")]
    PartitionTooLarge(usize),

    #[error("training data hash mismatch: model expects {expected:016x}, data hashes to {found:016x}")]
    HashMismatch { expected: u64, found: u64 },

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model mode does not support this operation: {0}")]
    WrongMode(&'static str),
}
