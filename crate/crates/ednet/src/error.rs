use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, with a description of the offending dims.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A block's weight map is missing a slot or a slot has the wrong shape.
    #[error("weight schema violation: {0}")]
    Schema(String),

    /// Malformed file contents (weight files, PPM images, JSON lines).
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Bad user-supplied argument (unknown variant name, invalid config).
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Integer accumulator left the i32 range in the quantized conv path.
    #[error("int32 accumulator overflow in quantized conv at {0}")]
    AccumulatorOverflow(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
