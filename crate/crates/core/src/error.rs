use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of grid")]
    IndexOutOfGrid,
    #[error("sample outside grid")]
    SampleOutsideGrid,
    #[error("corrupt index stream")]
    CorruptIndexStream,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate importance field")]
    DegenerateImportance,
    #[error("codebook larger than population")]
    CodebookLargerThanPopulation,
    #[error("empty codebook")]
    EmptyCodebook,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("zero-resolution camera")]
    ZeroResolution,
    #[error("training diverged")]
    TrainingDiverged,
    #[error("finetune diverged")]
    FinetuneDiverged,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("symbol {symbol} does not fit in {bits} bits")]
    SymbolOverflow { symbol: u32, bits: u32 },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("inflate failure in section {section}: {reason}")]
    Inflate { section: &'static str, reason: String },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors raised by numeric failure rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::TrainingDiverged | Error::FinetuneDiverged)
    }
}
