use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed MIDI header: {0}")]
    MalformedHeader(String),
    #[error("truncated chunk `{chunk}`: declared {declared} bytes, {available} available")]
    TruncatedChunk {
        chunk: String,
        declared: usize,
        available: usize,
    },
    #[error("malformed track data at byte {offset}: {reason}")]
    MalformedTrack { offset: usize, reason: String },
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("unsupported time division: {0}")]
    UnsupportedDivision(String),
    #[error("unsupported time signature {numerator}/{denominator} at tick {tick}; only 4/4 is accepted")]
    UnsupportedTimeSignature { tick: u64, numerator: u8, denominator: u32 },
    #[error("instrument scheme line {line}: {reason}")]
    InstrumentScheme { line: usize, reason: String },
    #[error("malformed tensor dump: {0}")]
    TensorFormat(String),
    #[error("non-finite activation in layer `{0}`")]
    NumericOverflow(String),
    #[error("training diverged at {stage} {index}")]
    Diverged { stage: &'static str, index: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("image has no positive cells")]
    EmptyImage,
    #[error("unknown instrument id {0}")]
    UnknownInstrument(u8),
    #[error("task has an empty mask set: {0}")]
    EmptyMask(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("graph: {0}")]
    Graph(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by the caller's inputs rather than by the program.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::NumericOverflow(_) | Error::Diverged { .. } | Error::EmptyImage
        ) && !matches!(self, Error::Io(e) if e.kind() != std::io::ErrorKind::NotFound && e.kind() != std::io::ErrorKind::InvalidData)
    }
}
